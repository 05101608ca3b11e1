//! Sequential model-based hyperparameter search.
//!
//! The engine is a density-ratio surrogate in the tree-structured Parzen
//! style: after a uniformly random warm-up phase, past trials are split into
//! a top-γ "good" set and the remaining "bad" set, and each new proposal is
//! the best of 24 candidates drawn from kernel densities around the good
//! trials, scored by the log density ratio good/bad. All randomness flows
//! from a single `u64` seed, so a run is reproducible byte for byte.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("search space is empty")]
    EmptySpace,
    #[error("every trial failed; nothing to select")]
    AllTrialsFailed,
    #[error("invalid domain for {param}: {detail}")]
    InvalidDomain { param: String, detail: String },
    #[error("writing trial log: {0}")]
    Io(#[from] std::io::Error),
}

/// One hyperparameter's domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Domain {
    /// Inclusive real interval, optionally searched on a log scale.
    Continuous { lo: f64, hi: f64, log: bool },
    /// Inclusive integer range.
    Integer { lo: i64, hi: i64 },
    Categorical { choices: Vec<String> },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    /// Ordered map so iteration (and therefore sampling) is deterministic.
    pub params: BTreeMap<String, Domain>,
}

impl SearchSpace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, domain: Domain) -> Self {
        self.params.insert(name.to_owned(), domain);
        self
    }

    pub fn validate(&self) -> Result<(), TuneError> {
        if self.params.is_empty() {
            return Err(TuneError::EmptySpace);
        }
        for (name, domain) in &self.params {
            let bad = |detail: &str| TuneError::InvalidDomain {
                param: name.clone(),
                detail: detail.to_owned(),
            };
            match domain {
                Domain::Continuous { lo, hi, log } => {
                    if !(lo < hi) {
                        return Err(bad("requires lo < hi"));
                    }
                    if *log && *lo <= 0.0 {
                        return Err(bad("log scale requires lo > 0"));
                    }
                }
                Domain::Integer { lo, hi } => {
                    if lo > hi {
                        return Err(bad("requires lo <= hi"));
                    }
                }
                Domain::Categorical { choices } => {
                    if choices.is_empty() {
                        return Err(bad("requires at least one choice"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// A sampled hyperparameter value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Float(f64),
    Str(String),
}

impl ParamValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            ParamValue::Float(v) => Some(*v),
            ParamValue::Int(v) => Some(*v as f64),
            ParamValue::Str(_) => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            ParamValue::Int(v) => Some(*v),
            ParamValue::Float(v) => Some(*v as i64),
            ParamValue::Str(_) => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            ParamValue::Str(v) => Some(v),
            _ => None,
        }
    }
}

pub type Params = BTreeMap<String, ParamValue>;

/// One completed evaluation inside `optimize`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub params: Params,
    /// `NEG_INFINITY` when the objective failed.
    pub score: f64,
    pub failed: bool,
}

/// One tuning trial with its cross-validation breakdown, as persisted to the
/// trial log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_index: usize,
    pub params: Params,
    pub cv_scores: Vec<f64>,
    /// Mean of `cv_scores`; `NEG_INFINITY` when the trial failed.
    pub mean_score: f64,
    pub failed: bool,
    /// Seconds spent on the trial. Informational only — excluded from the
    /// trial log so reruns are byte-identical.
    pub wall_time: f64,
}

const GAMMA: f64 = 0.25;
const CANDIDATES_PER_TRIAL: usize = 24;
const CATEGORICAL_KEEP_PROB: f64 = 0.8;

fn warmup_trials(budget: usize) -> usize {
    budget.min(10.max(budget / 10))
}

/// Maps a continuous value into the space the kernel operates in.
fn to_search_scale(v: f64, log: bool) -> f64 {
    if log {
        v.ln()
    } else {
        v
    }
}

fn from_search_scale(v: f64, log: bool) -> f64 {
    if log {
        v.exp()
    } else {
        v
    }
}

fn sample_uniform(domain: &Domain, rng: &mut ChaCha20Rng) -> ParamValue {
    match domain {
        Domain::Continuous { lo, hi, log } => {
            let (a, b) = (to_search_scale(*lo, *log), to_search_scale(*hi, *log));
            ParamValue::Float(from_search_scale(rng.gen_range(a..=b), *log))
        }
        Domain::Integer { lo, hi } => ParamValue::Int(rng.gen_range(*lo..=*hi)),
        Domain::Categorical { choices } => {
            ParamValue::Str(choices[rng.gen_range(0..choices.len())].clone())
        }
    }
}

fn sample_params(space: &SearchSpace, rng: &mut ChaCha20Rng) -> Params {
    space
        .params
        .iter()
        .map(|(name, domain)| (name.clone(), sample_uniform(domain, rng)))
        .collect()
}

/// Kernel bandwidth: a tenth of the domain's extent in search scale.
fn bandwidth(domain: &Domain) -> f64 {
    match domain {
        Domain::Continuous { lo, hi, log } => {
            (to_search_scale(*hi, *log) - to_search_scale(*lo, *log)) / 10.0
        }
        Domain::Integer { lo, hi } => (((hi - lo) as f64) / 10.0).max(1.0),
        Domain::Categorical { .. } => 0.0,
    }
}

fn normal_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
}

/// Density of `value` under the kernel mixture centred on `trials`, with a
/// uniform prior component so unseen regions never score zero.
fn mixture_density(domain: &Domain, trials: &[&Params], name: &str, value: &ParamValue) -> f64 {
    let prior = match domain {
        Domain::Continuous { lo, hi, log } => {
            1.0 / (to_search_scale(*hi, *log) - to_search_scale(*lo, *log))
        }
        Domain::Integer { lo, hi } => 1.0 / ((hi - lo + 1) as f64),
        Domain::Categorical { choices } => 1.0 / choices.len() as f64,
    };
    let mut total = prior;
    for trial in trials {
        let Some(center) = trial.get(name) else { continue };
        let k = match domain {
            Domain::Continuous { log, .. } => {
                let x = to_search_scale(value.as_f64().unwrap_or(0.0), *log);
                let mu = to_search_scale(center.as_f64().unwrap_or(0.0), *log);
                normal_pdf(x, mu, bandwidth(domain))
            }
            Domain::Integer { .. } => {
                let x = value.as_f64().unwrap_or(0.0);
                let mu = center.as_f64().unwrap_or(0.0);
                normal_pdf(x, mu, bandwidth(domain))
            }
            Domain::Categorical { choices } => {
                if center == value {
                    CATEGORICAL_KEEP_PROB
                } else if choices.len() > 1 {
                    (1.0 - CATEGORICAL_KEEP_PROB) / (choices.len() - 1) as f64
                } else {
                    1.0
                }
            }
        };
        total += k;
    }
    total / (trials.len() + 1) as f64
}

/// Draws one candidate by perturbing a randomly chosen good trial.
fn sample_from_good(
    space: &SearchSpace,
    good: &[&Params],
    rng: &mut ChaCha20Rng,
) -> Params {
    let base = good[rng.gen_range(0..good.len())];
    space
        .params
        .iter()
        .map(|(name, domain)| {
            let value = match (domain, base.get(name)) {
                (Domain::Continuous { lo, hi, log }, Some(center)) => {
                    let mu = to_search_scale(center.as_f64().unwrap_or(*lo), *log);
                    let draw = mu + bandwidth(domain) * rng.sample::<f64, _>(rand_distr::StandardNormal);
                    let clipped = draw.clamp(to_search_scale(*lo, *log), to_search_scale(*hi, *log));
                    ParamValue::Float(from_search_scale(clipped, *log))
                }
                (Domain::Integer { lo, hi }, Some(center)) => {
                    let mu = center.as_f64().unwrap_or(*lo as f64);
                    let draw = mu + bandwidth(domain) * rng.sample::<f64, _>(rand_distr::StandardNormal);
                    ParamValue::Int((draw.round() as i64).clamp(*lo, *hi))
                }
                (Domain::Categorical { choices }, Some(center)) => {
                    if rng.gen_bool(CATEGORICAL_KEEP_PROB) {
                        center.clone()
                    } else {
                        ParamValue::Str(choices[rng.gen_range(0..choices.len())].clone())
                    }
                }
                (domain, None) => sample_uniform(domain, rng),
            };
            (name.clone(), value)
        })
        .collect()
}

/// Proposes the next trial's parameters given the history so far.
fn propose(space: &SearchSpace, history: &[Trial], rng: &mut ChaCha20Rng) -> Params {
    // Rank finished trials best-first; failures sink to the bottom.
    let mut ranked: Vec<&Trial> = history.iter().collect();
    ranked.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.index.cmp(&b.index))
    });
    let n_good = (GAMMA * ranked.len() as f64).floor().max(1.0) as usize;
    let good: Vec<&Params> = ranked[..n_good].iter().map(|t| &t.params).collect();
    let bad: Vec<&Params> = ranked[n_good..].iter().map(|t| &t.params).collect();
    if bad.is_empty() {
        return sample_params(space, rng);
    }

    let mut best: Option<(f64, Params)> = None;
    for _ in 0..CANDIDATES_PER_TRIAL {
        let candidate = sample_from_good(space, &good, rng);
        let mut ratio = 0.0;
        for (name, domain) in &space.params {
            let value = &candidate[name];
            let l = mixture_density(domain, &good, name, value);
            let g = mixture_density(domain, &bad, name, value);
            ratio += l.max(1e-300).ln() - g.max(1e-300).ln();
        }
        // Strict comparison keeps the first of tied candidates.
        if best.as_ref().map_or(true, |(s, _)| ratio > *s) {
            best = Some((ratio, candidate));
        }
    }
    best.map(|(_, p)| p).unwrap_or_else(|| sample_params(space, rng))
}

/// Runs `budget` sequential trials of `objective` over `space`.
///
/// The objective returns `None` to mark a failed trial; failures score
/// negative infinity and can never win. Returns the best trial's index into
/// the returned history (highest score, ties to the earliest trial).
pub fn optimize(
    space: &SearchSpace,
    budget: usize,
    seed: u64,
    objective: &mut dyn FnMut(usize, &Params) -> Option<f64>,
) -> Result<(usize, Vec<Trial>), TuneError> {
    space.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let warmup = warmup_trials(budget);
    let mut history: Vec<Trial> = Vec::with_capacity(budget);
    for index in 0..budget {
        let params = if index < warmup {
            sample_params(space, &mut rng)
        } else {
            propose(space, &history, &mut rng)
        };
        let result = objective(index, &params);
        history.push(Trial {
            index,
            params,
            score: result.unwrap_or(f64::NEG_INFINITY),
            failed: result.is_none(),
        });
    }
    let best = history
        .iter()
        .filter(|t| !t.failed)
        .max_by(|a, b| {
            a.score
                .partial_cmp(&b.score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(b.index.cmp(&a.index))
        })
        .map(|t| t.index)
        .ok_or(TuneError::AllTrialsFailed)?;
    Ok((best, history))
}

/// Writes the trial log CSV: `trial,params,cv_scores,mean_score,failed`.
/// Wall time is deliberately left out so reruns diff clean.
pub fn write_trial_log(path: &Path, records: &[TrialRecord]) -> Result<(), TuneError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut writer = csv::Writer::from_writer(&mut out);
    writer
        .write_record(["trial", "params", "cv_scores", "mean_score", "failed"])
        .map_err(|e| TuneError::Io(e.into()))?;
    for r in records {
        let params = serde_json::to_string(&r.params).expect("params serialize");
        let scores = serde_json::to_string(&r.cv_scores).expect("scores serialize");
        writer
            .write_record([
                r.trial_index.to_string(),
                params,
                scores,
                format!("{}", r.mean_score),
                r.failed.to_string(),
            ])
            .map_err(|e| TuneError::Io(e.into()))?;
    }
    writer.flush()?;
    drop(writer);
    out.flush()?;
    Ok(())
}

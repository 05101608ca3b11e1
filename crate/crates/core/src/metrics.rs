//! Evaluation metrics and bootstrap confidence intervals.
//!
//! Classification: accuracy, per-class precision/recall/F1, macro-F1, and
//! AUC in the rank-statistic formulation (tied scores contribute ½).
//! Regression: MSE, MAE, R². Intervals are percentile bootstrap over paired
//! resamples, deterministic under a fixed seed.
//!
//! A class absent from predictions (or truth) gets precision/recall 0 with
//! a note rather than a division by zero.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::problems::TaskType;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("input length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("metrics need at least one observation")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapInterval {
    pub low: f64,
    pub high: f64,
    pub n_resamples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task_type: TaskType,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_class: Vec<ClassMetrics>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub bootstrap: BTreeMap<String, BootstrapInterval>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl MetricReport {
    pub fn to_text(&self) -> String {
        let mut out = String::from("Model auditor\n");
        for (name, value) in &self.metrics {
            out.push_str(&format!("  {name:<24} {value:.6}\n"));
        }
        for c in &self.per_class {
            out.push_str(&format!(
                "  class {:<4} precision {:.4}  recall {:.4}  f1 {:.4}  support {}\n",
                c.class, c.precision, c.recall, c.f1, c.support
            ));
        }
        for (name, ci) in &self.bootstrap {
            out.push_str(&format!(
                "  {name} 95% CI [{:.6}, {:.6}]  ({} resamples, seed {})\n",
                ci.low, ci.high, ci.n_resamples, ci.seed
            ));
        }
        for note in &self.notes {
            out.push_str(&format!("  note: {note}\n"));
        }
        out
    }
}

fn check_lengths(a: usize, b: usize) -> Result<(), MetricError> {
    if a != b {
        return Err(MetricError::LengthMismatch(a, b));
    }
    if a == 0 {
        return Err(MetricError::Empty);
    }
    Ok(())
}

pub fn accuracy(y_true: &[f64], y_pred: &[f64]) -> f64 {
    let correct = y_true.iter().zip(y_pred).filter(|(t, p)| t == p).count();
    correct as f64 / y_true.len() as f64
}

/// Accuracy, per-class precision/recall/F1, macro-F1, and (given scores) AUC.
pub fn classification_metrics(
    y_true: &[f64],
    y_pred: &[f64],
    y_score: Option<&[f64]>,
) -> Result<MetricReport, MetricError> {
    check_lengths(y_true.len(), y_pred.len())?;
    if let Some(scores) = y_score {
        check_lengths(y_true.len(), scores.len())?;
    }

    let mut notes = Vec::new();
    let mut classes: Vec<f64> = y_true.iter().chain(y_pred).copied().collect();
    classes.sort_by(f64::total_cmp);
    classes.dedup();

    let mut per_class = Vec::new();
    for &class in &classes {
        let tp = y_true
            .iter()
            .zip(y_pred)
            .filter(|(t, p)| **t == class && **p == class)
            .count() as f64;
        let fp = y_true
            .iter()
            .zip(y_pred)
            .filter(|(t, p)| **t != class && **p == class)
            .count() as f64;
        let fn_ = y_true
            .iter()
            .zip(y_pred)
            .filter(|(t, p)| **t == class && **p != class)
            .count() as f64;
        let precision = if tp + fp == 0.0 {
            notes.push(format!("class {class}: no predicted instances; precision set to 0"));
            0.0
        } else {
            tp / (tp + fp)
        };
        let recall = if tp + fn_ == 0.0 {
            notes.push(format!("class {class}: no true instances; recall set to 0"));
            0.0
        } else {
            tp / (tp + fn_)
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(ClassMetrics {
            class,
            precision,
            recall,
            f1,
            support: y_true.iter().filter(|t| **t == class).count(),
        });
    }

    let mut metrics = BTreeMap::new();
    metrics.insert("accuracy".to_owned(), accuracy(y_true, y_pred));
    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / per_class.len() as f64;
    metrics.insert("f1_macro".to_owned(), macro_f1);

    if let Some(scores) = y_score {
        match auc(y_true, scores) {
            Some(value) => {
                metrics.insert("auc".to_owned(), value);
            }
            None => notes.push("AUC undefined: fewer than two classes in y_true".into()),
        }
    }

    Ok(MetricReport {
        task_type: TaskType::Binary,
        metrics,
        per_class,
        bootstrap: BTreeMap::new(),
        notes,
    })
}

/// Rank-based AUC (Mann-Whitney U): positives are the rows whose label is the
/// larger of the two class values; tied scores contribute ½. `None` when
/// y_true holds a single class.
pub fn auc(y_true: &[f64], y_score: &[f64]) -> Option<f64> {
    let mut classes: Vec<f64> = y_true.to_vec();
    classes.sort_by(f64::total_cmp);
    classes.dedup();
    if classes.len() != 2 {
        return None;
    }
    let positive = classes[1];
    let n_pos = y_true.iter().filter(|t| **t == positive).count() as f64;
    let n_neg = y_true.len() as f64 - n_pos;

    // Average ranks with ties sharing their mean rank.
    let mut order: Vec<usize> = (0..y_score.len()).collect();
    order.sort_by(|&a, &b| y_score[a].total_cmp(&y_score[b]));
    let mut ranks = vec![0.0; y_score.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && y_score[order[j + 1]] == y_score[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share the mean.
        let mean_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mean_rank;
        }
        i = j + 1;
    }

    let rank_sum: f64 = y_true
        .iter()
        .zip(&ranks)
        .filter(|(t, _)| **t == positive)
        .map(|(_, r)| *r)
        .sum();
    let u = rank_sum - n_pos * (n_pos + 1.0) / 2.0;
    Some(u / (n_pos * n_neg))
}

/// MSE, MAE, and R²; R² is omitted (with a note) when y_true is constant or
/// has fewer than two rows.
pub fn regression_metrics(y_true: &[f64], y_pred: &[f64]) -> Result<MetricReport, MetricError> {
    check_lengths(y_true.len(), y_pred.len())?;
    let n = y_true.len() as f64;
    let mse = y_true
        .iter()
        .zip(y_pred)
        .map(|(t, p)| (t - p).powi(2))
        .sum::<f64>()
        / n;
    let mae = y_true
        .iter()
        .zip(y_pred)
        .map(|(t, p)| (t - p).abs())
        .sum::<f64>()
        / n;

    let mut metrics = BTreeMap::new();
    let mut notes = Vec::new();
    metrics.insert("mse".to_owned(), mse);
    metrics.insert("mae".to_owned(), mae);
    match r_squared(y_true, y_pred) {
        Some(r2) => {
            metrics.insert("r2".to_owned(), r2);
        }
        None => notes.push("R² undefined: constant y_true or fewer than 2 rows".into()),
    }

    Ok(MetricReport {
        task_type: TaskType::Regression,
        metrics,
        per_class: vec![],
        bootstrap: BTreeMap::new(),
        notes,
    })
}

pub fn r_squared(y_true: &[f64], y_pred: &[f64]) -> Option<f64> {
    if y_true.len() < 2 {
        return None;
    }
    let mean = y_true.iter().sum::<f64>() / y_true.len() as f64;
    let ss_tot: f64 = y_true.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return None;
    }
    let ss_res: f64 = y_true.iter().zip(y_pred).map(|(t, p)| (t - p).powi(2)).sum();
    Some(1.0 - ss_res / ss_tot)
}

/// Percentile bootstrap interval for any metric computable from paired
/// vectors; resamples where the metric is undefined (single-class AUC draws
/// and the like) are skipped.
pub fn bootstrap_ci(
    metric: impl Fn(&[f64], &[f64]) -> Option<f64>,
    y_true: &[f64],
    y_pred_or_score: &[f64],
    n_resamples: usize,
    seed: u64,
    level: f64,
) -> Option<BootstrapInterval> {
    let n = y_true.len();
    if n == 0 {
        return None;
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(n_resamples);
    let mut t = Vec::with_capacity(n);
    let mut p = Vec::with_capacity(n);
    for _ in 0..n_resamples {
        t.clear();
        p.clear();
        for _ in 0..n {
            let i = rng.gen_range(0..n);
            t.push(y_true[i]);
            p.push(y_pred_or_score[i]);
        }
        if let Some(v) = metric(&t, &p) {
            values.push(v);
        }
    }
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Some(BootstrapInterval {
        low: percentile(&values, alpha),
        high: percentile(&values, 1.0 - alpha),
        n_resamples,
        seed,
    })
}

/// Linear-interpolation quantile over a sorted slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_example() {
        let report = classification_metrics(&[1.0, 0.0, 1.0, 1.0], &[1.0, 0.0, 0.0, 1.0], None).unwrap();
        assert!((report.metrics["accuracy"] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn macro_f1_hand_oracle() {
        // class 1: tp=2 fp=0 fn=1 → P=1, R=2/3, F1=0.8
        // class 0: tp=1 fp=1 fn=0 → P=0.5, R=1, F1=2/3
        let report = classification_metrics(&[1.0, 0.0, 1.0, 1.0], &[1.0, 0.0, 0.0, 1.0], None).unwrap();
        let expected = (0.8 + 2.0 / 3.0) / 2.0;
        assert!((report.metrics["f1_macro"] - expected).abs() < 1e-9);
        assert!((report.metrics["f1_macro"] - 0.733333333).abs() < 1e-6);
    }

    #[test]
    fn macro_f1_invariant_under_renaming() {
        let y_true = [1.0, 0.0, 1.0, 1.0, 0.0];
        let y_pred = [1.0, 0.0, 0.0, 1.0, 1.0];
        let renamed_true: Vec<f64> = y_true.iter().map(|v| if *v == 1.0 { 7.0 } else { 5.0 }).collect();
        let renamed_pred: Vec<f64> = y_pred.iter().map(|v| if *v == 1.0 { 7.0 } else { 5.0 }).collect();
        let a = classification_metrics(&y_true, &y_pred, None).unwrap();
        let b = classification_metrics(&renamed_true, &renamed_pred, None).unwrap();
        assert!((a.metrics["f1_macro"] - b.metrics["f1_macro"]).abs() < 1e-12);
    }

    #[test]
    fn zero_denominator_class_gets_zero_and_note() {
        // Class 1 never predicted: precision denominator is 0.
        let report = classification_metrics(&[1.0, 1.0, 0.0], &[0.0, 0.0, 0.0], None).unwrap();
        let class1 = report.per_class.iter().find(|c| c.class == 1.0).unwrap();
        assert_eq!(class1.precision, 0.0);
        assert_eq!(class1.f1, 0.0);
        assert!(!report.notes.is_empty());
    }

    #[test]
    fn auc_perfect_and_ties() {
        assert_eq!(auc(&[0.0, 0.0, 1.0, 1.0], &[0.1, 0.2, 0.8, 0.9]), Some(1.0));
        // All scores tied → every pair contributes ½.
        assert_eq!(auc(&[0.0, 1.0, 0.0, 1.0], &[0.5, 0.5, 0.5, 0.5]), Some(0.5));
        // Single tie across the boundary.
        let value = auc(&[0.0, 0.0, 1.0, 1.0], &[0.1, 0.5, 0.5, 0.9]).unwrap();
        assert!((value - 0.875).abs() < 1e-12); // 3.5 of 4 pairs
        assert_eq!(auc(&[1.0, 1.0], &[0.3, 0.4]), None);
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let y = [0.0, 1.0, 0.0, 1.0, 1.0, 0.0];
        let s: [f64; 6] = [0.1, 0.7, 0.4, 0.6, 0.9, 0.2];
        let transformed: Vec<f64> = s.iter().map(|x| (x * 3.0).exp() + 5.0).collect();
        assert_eq!(auc(&y, &s), auc(&y, &transformed));
    }

    #[test]
    fn regression_oracles() {
        let perfect = regression_metrics(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(perfect.metrics["mse"], 0.0);
        assert_eq!(perfect.metrics["mae"], 0.0);
        assert_eq!(perfect.metrics["r2"], 1.0);

        // Predicting the mean of [1,2,3]: MSE=MAE=2/3, R²=0.
        let mean = regression_metrics(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).unwrap();
        assert!((mean.metrics["mse"] - 2.0 / 3.0).abs() < 1e-12);
        assert!((mean.metrics["mae"] - 2.0 / 3.0).abs() < 1e-12);
        assert!(mean.metrics["r2"].abs() < 1e-12);

        let constant = regression_metrics(&[5.0, 5.0], &[4.0, 6.0]).unwrap();
        assert!(!constant.metrics.contains_key("r2"));
        assert!(!constant.notes.is_empty());
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(matches!(
            classification_metrics(&[1.0], &[1.0, 0.0], None),
            Err(MetricError::LengthMismatch(1, 2))
        ));
        assert!(matches!(
            regression_metrics(&[], &[]),
            Err(MetricError::Empty)
        ));
    }

    #[test]
    fn bootstrap_zero_variance_and_determinism() {
        let y = vec![1.0; 50];
        let p = vec![1.0; 50];
        let acc = |t: &[f64], p: &[f64]| Some(accuracy(t, p));
        let ci = bootstrap_ci(acc, &y, &p, 200, 7, 0.95).unwrap();
        assert_eq!((ci.low, ci.high), (1.0, 1.0));

        let y2: Vec<f64> = (0..100).map(|i| if i % 10 == 0 { 0.0 } else { 1.0 }).collect();
        let p2 = vec![1.0; 100];
        let a = bootstrap_ci(acc, &y2, &p2, 500, 42, 0.95).unwrap();
        let b = bootstrap_ci(acc, &y2, &p2, 500, 42, 0.95).unwrap();
        assert_eq!((a.low, a.high), (b.low, b.high));
        assert!(a.low <= 0.9 && 0.9 <= a.high);
        // Normal-approximation sanity: width < 4σ ≈ 0.12 at n=100.
        assert!(a.high - a.low < 0.15);
        assert!(a.low >= 0.0 && a.high <= 1.0);
    }

    #[test]
    fn report_serializes() {
        let report = classification_metrics(&[1.0, 0.0], &[1.0, 0.0], Some(&[0.9, 0.1])).unwrap();
        assert_eq!(report.metrics["auc"], 1.0);
        let json = serde_json::to_string(&report).unwrap();
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
        assert!(report.to_text().contains("accuracy"));
    }
}

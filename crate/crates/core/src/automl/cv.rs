//! Data splitting and cross-validated scoring.
//!
//! Binary splits are stratified by dealing each class's shuffled rows onto a
//! fold cursor that continues across classes, so both the per-class and the
//! overall fold sizes balance to within one row. Every fold refits the
//! preprocessing statistics on its own training rows — fold test rows never
//! leak into imputation means, category sets, or min-max ranges.

use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::estimators;
use super::preprocess::Preprocessor;
use super::tuner::Params;
use crate::featurize::FeatureMatrix;
use crate::metrics;
use crate::problems::TaskType;

#[derive(Debug, Error)]
pub enum CvError {
    #[error("need at least 2 rows, found {found}")]
    TooFewRows { found: usize },
    #[error("fold count must satisfy 2 <= k <= rows, got k={k} over {rows} rows")]
    BadFoldCount { k: usize, rows: usize },
    #[error("split ratio must lie strictly between 0 and 1, got {ratio}")]
    BadRatio { ratio: f64 },
    #[error("labels and matrix disagree: {labels} labels vs {rows} rows")]
    LengthMismatch { labels: usize, rows: usize },
    #[error("every fold was degenerate: {detail}")]
    AllFoldsDegenerate { detail: String },
}

/// Scoring function used for model selection and reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    F1Macro,
    Auc,
    Mse,
    Mae,
    R2,
}

impl Metric {
    pub const ALL: [Metric; 6] =
        [Metric::Accuracy, Metric::F1Macro, Metric::Auc, Metric::Mse, Metric::Mae, Metric::R2];

    /// Headline metric per task: macro-F1 for binary, R² for regression.
    pub fn default_for(task: TaskType) -> Metric {
        match task {
            TaskType::Binary => Metric::F1Macro,
            TaskType::Regression => Metric::R2,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::F1Macro => "f1_macro",
            Metric::Auc => "auc",
            Metric::Mse => "mse",
            Metric::Mae => "mae",
            Metric::R2 => "r2",
        }
    }

    pub fn higher_is_better(&self) -> bool {
        !matches!(self, Metric::Mse | Metric::Mae)
    }

    /// Converts a raw metric value into a maximization score for the tuner.
    pub fn orient(&self, raw: f64) -> f64 {
        if self.higher_is_better() {
            raw
        } else {
            -raw
        }
    }

    /// Raw metric value; `None` when undefined on this fold (e.g. AUC with a
    /// single observed class, R² with constant truth).
    pub fn evaluate(
        &self,
        y_true: &[f64],
        y_pred: &[f64],
        scores: Option<&[f64]>,
    ) -> Option<f64> {
        if y_true.is_empty() || y_true.len() != y_pred.len() {
            return None;
        }
        match self {
            Metric::Accuracy => Some(metrics::accuracy(y_true, y_pred)),
            Metric::F1Macro => {
                let report = metrics::classification_metrics(y_true, y_pred, None).ok()?;
                report.metrics.get("f1_macro").copied()
            }
            Metric::Auc => metrics::auc(y_true, scores?),
            Metric::Mse => {
                let n = y_true.len() as f64;
                Some(
                    y_true.iter().zip(y_pred).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n,
                )
            }
            Metric::Mae => {
                let n = y_true.len() as f64;
                Some(y_true.iter().zip(y_pred).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
            }
            Metric::R2 => metrics::r_squared(y_true, y_pred),
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown metric {s:?} (expected one of accuracy, f1_macro, auc, mse, mae, r2)"))
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Class-grouped row indices; a single group for regression. Groups are
/// ordered by class value so the dealing order is deterministic.
fn class_groups(y: &[f64], task: TaskType) -> Vec<Vec<usize>> {
    match task {
        TaskType::Regression => vec![(0..y.len()).collect()],
        TaskType::Binary => {
            let mut classes: Vec<f64> = y.to_vec();
            classes.sort_by(f64::total_cmp);
            classes.dedup();
            classes
                .iter()
                .map(|&c| (0..y.len()).filter(|&i| y[i] == c).collect())
                .collect()
        }
    }
}

/// Test-fold index sets for stratified k-fold cross-validation.
pub fn stratified_kfold(
    y: &[f64],
    k: usize,
    task: TaskType,
    seed: u64,
) -> Result<Vec<Vec<usize>>, CvError> {
    let n = y.len();
    if k < 2 || k > n {
        return Err(CvError::BadFoldCount { k, rows: n });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut cursor = 0usize;
    for mut group in class_groups(y, task) {
        group.shuffle(&mut rng);
        for idx in group {
            folds[cursor % k].push(idx);
            cursor += 1;
        }
    }
    for fold in &mut folds {
        fold.sort_unstable();
    }
    Ok(folds)
}

/// Deterministic stratified holdout: `ratio` of rows go to train, the rest to
/// test. Both sides are guaranteed non-empty.
pub fn train_test_split(
    y: &[f64],
    ratio: f64,
    task: TaskType,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), CvError> {
    let n = y.len();
    if n < 2 {
        return Err(CvError::TooFewRows { found: n });
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CvError::BadRatio { ratio });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for mut group in class_groups(y, task) {
        group.shuffle(&mut rng);
        let n_test = ((group.len() as f64) * (1.0 - ratio)).round() as usize;
        let n_test = n_test.min(group.len());
        test.extend_from_slice(&group[..n_test]);
        train.extend_from_slice(&group[n_test..]);
    }
    // Rounding can starve one side on tiny inputs; rebalance by one row.
    if test.is_empty() {
        test.push(train.pop().expect("n >= 2"));
    }
    if train.is_empty() {
        train.push(test.pop().expect("n >= 2"));
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Per-fold scores for one estimator configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvOutcome {
    pub scores: Vec<f64>,
    /// One entry per skipped fold, explaining why.
    pub notes: Vec<String>,
}

impl CvOutcome {
    pub fn mean_score(&self) -> f64 {
        if self.scores.is_empty() {
            f64::NEG_INFINITY
        } else {
            self.scores.iter().sum::<f64>() / self.scores.len() as f64
        }
    }
}

/// Scores `estimator`+`params` by k-fold cross-validation over the rows of
/// `matrix`. Transformers and the estimator are fit per fold on that fold's
/// training rows only. Folds whose fit degenerates (one-class training data)
/// or whose metric is undefined are skipped with a note; if every fold is
/// skipped the whole evaluation errors so callers can mark the trial failed.
#[allow(clippy::too_many_arguments)]
pub fn cross_validate(
    matrix: &FeatureMatrix,
    y: &[f64],
    task: TaskType,
    estimator: &str,
    params: &Params,
    k: usize,
    metric: Metric,
    seed: u64,
) -> Result<CvOutcome, CvError> {
    if y.len() != matrix.entity_ids.len() {
        return Err(CvError::LengthMismatch { labels: y.len(), rows: matrix.entity_ids.len() });
    }
    let folds = stratified_kfold(y, k, task, seed)?;
    let all: Vec<usize> = (0..y.len()).collect();
    let mut outcome = CvOutcome { scores: Vec::new(), notes: Vec::new() };
    for (i, fold) in folds.iter().enumerate() {
        let train_rows: Vec<usize> =
            all.iter().copied().filter(|r| !fold.contains(r)).collect();
        let prep = Preprocessor::fit(matrix, &train_rows);
        let x_train = prep.transform(matrix, &train_rows);
        let y_train: Vec<f64> = train_rows.iter().map(|&r| y[r]).collect();
        let fitted = match estimators::fit(estimator, task, params, &x_train, &y_train, seed) {
            Ok(m) => m,
            Err(e) => {
                outcome.notes.push(format!("fold {i} skipped: {e}"));
                continue;
            }
        };
        let x_test = prep.transform(matrix, fold);
        let y_test: Vec<f64> = fold.iter().map(|&r| y[r]).collect();
        let y_pred = fitted.predict(&x_test);
        let scores = fitted.decision_scores(&x_test);
        match metric.evaluate(&y_test, &y_pred, scores.as_deref()) {
            Some(v) => outcome.scores.push(v),
            None => outcome
                .notes
                .push(format!("fold {i} skipped: {metric} undefined on its test split")),
        }
    }
    if outcome.scores.is_empty() {
        return Err(CvError::AllFoldsDegenerate {
            detail: outcome.notes.join("; "),
        });
    }
    Ok(outcome)
}

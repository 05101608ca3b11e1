//! End-to-end training: hold out a stratified test split, tune every
//! estimator family with cross-validation inside the training split, refit
//! the winner on the full training split, and score it once on the held-out
//! rows. The fitted pipeline (preprocessing statistics + model + metadata)
//! serializes to a single JSON artifact.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::cv::{self, CvError, Metric};
use super::estimators::{self, EstimatorError, FittedEstimator};
use super::preprocess::Preprocessor;
use super::tuner::{self, Params, ParamValue, SearchSpace, TrialRecord, TuneError};
use crate::featurize::FeatureMatrix;
use crate::metrics::{classification_metrics, regression_metrics, MetricReport};
use crate::problems::TaskType;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0}")]
    Cv(#[from] CvError),
    #[error("{0}")]
    Tune(#[from] TuneError),
    #[error("{0}")]
    Estimator(#[from] EstimatorError),
    #[error("labels and matrix disagree: {labels} labels vs {rows} rows")]
    LengthMismatch { labels: usize, rows: usize },
    #[error("budget must be at least 1")]
    EmptyBudget,
    #[error("no estimator family produced a successful trial")]
    AllTrialsFailed,
    #[error("metric {metric} does not fit task {task:?}")]
    MetricTaskMismatch { metric: Metric, task: TaskType },
    #[error("artifact expects features {expected:?}... but matrix has {found:?}...")]
    FeatureMismatch { expected: String, found: String },
    #[error("reading/writing artifact: {0}")]
    Io(#[from] std::io::Error),
    #[error("artifact is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// An impute → one-hot → min-max → estimator pipeline, before fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub task_type: TaskType,
    pub estimator: String,
    pub params: Params,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub seed: u64,
    pub spec: PipelineSpec,
    /// SHA-256 over the feature matrix plus labels the model was fit on.
    pub data_hash: String,
    /// Raw (pre one-hot) feature names the artifact expects at predict time.
    pub feature_names: Vec<String>,
}

/// Fitted transformer + estimator states with their training provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedPipeline {
    pub preprocessor: Preprocessor,
    pub estimator: FittedEstimator,
    pub metadata: TrainingMetadata,
}

/// Content hash of (features, ids, cutoffs, cells, labels); byte-stable
/// across runs because every cell renders through the same formatting.
pub fn data_hash(matrix: &FeatureMatrix, y: &[f64]) -> String {
    let mut hasher = Sha256::new();
    for f in &matrix.features {
        hasher.update(f.name.as_bytes());
        hasher.update(b"\n");
    }
    for row in 0..matrix.row_count() {
        hasher.update(matrix.entity_ids[row].as_bytes());
        hasher.update(matrix.cutoff_times[row].to_string().as_bytes());
        for col in &matrix.columns {
            match col.get(row) {
                Some(v) => hasher.update(v.to_string().as_bytes()),
                None => hasher.update(b"<null>"),
            }
            hasher.update(b"|");
        }
        hasher.update(b"\n");
    }
    for v in y {
        hasher.update(v.to_bits().to_le_bytes());
    }
    format!("{:x}", hasher.finalize())
}

impl FittedPipeline {
    /// Fits the preprocessing statistics and the estimator on `rows` only.
    pub fn fit(
        spec: &PipelineSpec,
        matrix: &FeatureMatrix,
        y: &[f64],
        rows: &[usize],
        seed: u64,
    ) -> Result<Self, TrainError> {
        let preprocessor = Preprocessor::fit(matrix, rows);
        let x = preprocessor.transform(matrix, rows);
        let y_rows: Vec<f64> = rows.iter().map(|&r| y[r]).collect();
        let estimator =
            estimators::fit(&spec.estimator, spec.task_type, &spec.params, &x, &y_rows, seed)?;
        let train = matrix.subset(rows);
        Ok(FittedPipeline {
            preprocessor,
            estimator,
            metadata: TrainingMetadata {
                seed,
                spec: spec.clone(),
                data_hash: data_hash(&train, &y_rows),
                feature_names: matrix.features.iter().map(|f| f.name.clone()).collect(),
            },
        })
    }

    fn check_features(&self, matrix: &FeatureMatrix) -> Result<(), TrainError> {
        let found: Vec<&str> = matrix.features.iter().map(|f| f.name.as_str()).collect();
        let expected: Vec<&str> =
            self.metadata.feature_names.iter().map(|s| s.as_str()).collect();
        if found != expected {
            return Err(TrainError::FeatureMismatch {
                expected: expected.first().copied().unwrap_or("<none>").to_owned(),
                found: found.first().copied().unwrap_or("<none>").to_owned(),
            });
        }
        Ok(())
    }

    pub fn predict(&self, matrix: &FeatureMatrix, rows: &[usize]) -> Result<Vec<f64>, TrainError> {
        self.check_features(matrix)?;
        let x = self.preprocessor.transform(matrix, rows);
        Ok(self.estimator.predict(&x))
    }

    /// Positive-class probabilities for binary pipelines.
    pub fn decision_scores(
        &self,
        matrix: &FeatureMatrix,
        rows: &[usize],
    ) -> Result<Option<Vec<f64>>, TrainError> {
        self.check_features(matrix)?;
        let x = self.preprocessor.transform(matrix, rows);
        Ok(self.estimator.decision_scores(&x))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let file = std::fs::File::create(path.as_ref())?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let file = std::fs::File::open(path.as_ref())?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }
}

/// Tunes one estimator family over `space` with `budget` sequential trials,
/// each scored by k-fold cross-validation. Returns the index of the best
/// record (highest metric, ties to the earliest trial) plus all records.
#[allow(clippy::too_many_arguments)]
pub fn tune(
    family: &str,
    space: &SearchSpace,
    matrix: &FeatureMatrix,
    y: &[f64],
    task: TaskType,
    budget: usize,
    k: usize,
    metric: Metric,
    seed: u64,
) -> Result<(usize, Vec<TrialRecord>), TrainError> {
    if budget == 0 {
        return Err(TrainError::EmptyBudget);
    }
    let mut records: Vec<TrialRecord> = Vec::with_capacity(budget);
    let outcome = tuner::optimize(space, budget, seed, &mut |index, params| {
        let started = Instant::now();
        let result = cv::cross_validate(matrix, y, task, family, params, k, metric, seed);
        let mut full_params = params.clone();
        full_params.insert("estimator".to_owned(), ParamValue::Str(family.to_owned()));
        let record = match &result {
            Ok(cv_outcome) => TrialRecord {
                trial_index: index,
                params: full_params,
                cv_scores: cv_outcome.scores.clone(),
                mean_score: cv_outcome.mean_score(),
                failed: false,
                wall_time: started.elapsed().as_secs_f64(),
            },
            Err(_) => TrialRecord {
                trial_index: index,
                params: full_params,
                cv_scores: Vec::new(),
                mean_score: f64::NEG_INFINITY,
                failed: true,
                wall_time: started.elapsed().as_secs_f64(),
            },
        };
        records.push(record);
        result.ok().map(|o| metric.orient(o.mean_score()))
    });
    match outcome {
        Ok((best, _)) => Ok((best, records)),
        Err(TuneError::AllTrialsFailed) => Err(TrainError::AllTrialsFailed),
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: TaskType,
    pub metric: Metric,
    /// Total trials, split across estimator families.
    pub budget: usize,
    pub cv_folds: usize,
    pub train_ratio: f64,
    pub seed: u64,
    /// Families to consider; `None` means the full registry for the task.
    pub estimators: Option<Vec<String>>,
}

impl TrainConfig {
    pub fn new(task: TaskType) -> Self {
        TrainConfig {
            task,
            metric: Metric::default_for(task),
            budget: 100,
            cv_folds: 10,
            train_ratio: 0.8,
            seed: 42,
            estimators: None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub pipeline: FittedPipeline,
    /// Every trial across all families, re-indexed globally in run order.
    pub trials: Vec<TrialRecord>,
    /// Index into `trials` of the winner.
    pub best_trial: usize,
    /// Metrics of the winning pipeline on the held-out test rows.
    pub report: MetricReport,
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
    pub notes: Vec<String>,
}

fn metric_fits_task(metric: Metric, task: TaskType) -> bool {
    match task {
        TaskType::Binary => {
            matches!(metric, Metric::Accuracy | Metric::F1Macro | Metric::Auc)
        }
        TaskType::Regression => matches!(metric, Metric::Mse | Metric::Mae | Metric::R2),
    }
}

/// Splits `budget` across `n` families: earlier families absorb the
/// remainder, so totals always add up to the full budget.
fn family_budgets(budget: usize, n: usize) -> Vec<usize> {
    let base = budget / n;
    let extra = budget % n;
    (0..n).map(|i| base + usize::from(i < extra)).collect()
}

/// Full AutoML run: 80/20-style stratified holdout, per-family tuning with
/// CV inside the training split, refit of the global winner, and one final
/// evaluation on the untouched test rows.
pub fn train_auto(
    matrix: &FeatureMatrix,
    y: &[f64],
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if y.len() != matrix.row_count() {
        return Err(TrainError::LengthMismatch { labels: y.len(), rows: matrix.row_count() });
    }
    if config.budget == 0 {
        return Err(TrainError::EmptyBudget);
    }
    if !metric_fits_task(config.metric, config.task) {
        return Err(TrainError::MetricTaskMismatch { metric: config.metric, task: config.task });
    }

    let (train_rows, test_rows) =
        cv::train_test_split(y, config.train_ratio, config.task, config.seed)?;
    let train_matrix = matrix.subset(&train_rows);
    let y_train: Vec<f64> = train_rows.iter().map(|&r| y[r]).collect();
    let k = config.cv_folds.clamp(2, train_rows.len().max(2));

    let families: Vec<String> = match &config.estimators {
        Some(list) => list.clone(),
        None => estimators::registry(config.task).iter().map(|s| (*s).to_owned()).collect(),
    };
    let budgets = family_budgets(config.budget, families.len());

    let mut trials: Vec<TrialRecord> = Vec::with_capacity(config.budget);
    let mut notes: Vec<String> = Vec::new();
    let mut best: Option<(f64, usize)> = None; // (oriented score, global trial index)
    for (f_idx, (family, &family_budget)) in families.iter().zip(&budgets).enumerate() {
        if family_budget == 0 {
            continue;
        }
        let space = estimators::default_space(family, config.task)?;
        let family_seed = config.seed.wrapping_add(f_idx as u64);
        let offset = trials.len();
        match tune(
            family,
            &space,
            &train_matrix,
            &y_train,
            config.task,
            family_budget,
            k,
            config.metric,
            family_seed,
        ) {
            Ok((family_best, mut records)) => {
                for r in &mut records {
                    r.trial_index += offset;
                }
                let winner = &records[family_best];
                let oriented = config.metric.orient(winner.mean_score);
                let global = winner.trial_index;
                if best.as_ref().map_or(true, |(s, _)| oriented > *s) {
                    best = Some((oriented, global));
                }
                trials.extend(records);
            }
            Err(TrainError::AllTrialsFailed) => {
                notes.push(format!("estimator {family}: every trial failed"));
            }
            Err(e) => return Err(e),
        }
    }
    let (_, best_trial) = best.ok_or(TrainError::AllTrialsFailed)?;

    let mut winning_params = trials[best_trial].params.clone();
    let estimator = winning_params
        .remove("estimator")
        .and_then(|v| v.as_str().map(str::to_owned))
        .expect("trial records carry their estimator");
    let spec = PipelineSpec { task_type: config.task, estimator, params: winning_params };
    let pipeline = FittedPipeline::fit(&spec, matrix, y, &train_rows, config.seed)?;

    let y_test: Vec<f64> = test_rows.iter().map(|&r| y[r]).collect();
    let y_pred = pipeline.predict(matrix, &test_rows)?;
    let scores = pipeline.decision_scores(matrix, &test_rows)?;
    let report = match config.task {
        TaskType::Binary => {
            classification_metrics(&y_test, &y_pred, scores.as_deref()).map_err(|e| {
                TrainError::Cv(CvError::AllFoldsDegenerate { detail: e.to_string() })
            })?
        }
        TaskType::Regression => regression_metrics(&y_test, &y_pred).map_err(|e| {
            TrainError::Cv(CvError::AllFoldsDegenerate { detail: e.to_string() })
        })?,
    };

    Ok(TrainOutcome { pipeline, trials, best_trial, report, train_rows, test_rows, notes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurize::{FeatureColumn, FeatureDef, FeatureExpr, FeatureKind, FeatureType};
    use chrono::NaiveDate;
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    fn toy_matrix(n: usize, seed: u64) -> (FeatureMatrix, Vec<f64>) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let t0 = NaiveDate::from_ymd_opt(2021, 6, 1)
            .unwrap()
            .and_hms_opt(12, 0, 0)
            .unwrap();
        let y: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let signal: Vec<Option<f64>> = y
            .iter()
            .map(|&v| Some(v + rng.gen_range(-0.1..0.1)))
            .collect();
        let noise: Vec<Option<f64>> = (0..n).map(|_| Some(rng.gen::<f64>())).collect();
        let defs: Vec<FeatureDef> = ["signal", "noise"]
            .iter()
            .map(|name| FeatureDef {
                name: (*name).to_owned(),
                kind: FeatureKind::Direct,
                primitive: "identity".into(),
                path: vec![],
                depth: 0,
                output_type: FeatureType::Numeric,
                expr: FeatureExpr::Direct { entity: "t".into(), column: (*name).to_owned() },
            })
            .collect();
        let matrix = FeatureMatrix {
            features: defs,
            entity_ids: (0..n).map(|i| format!("e{i}")).collect(),
            cutoff_times: vec![t0; n],
            columns: vec![FeatureColumn::Numeric(signal), FeatureColumn::Numeric(noise)],
        };
        (matrix, y)
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            budget: 6,
            cv_folds: 3,
            estimators: Some(vec!["logistic".into(), "gnb".into()]),
            ..TrainConfig::new(TaskType::Binary)
        }
    }

    #[test]
    fn train_auto_learns_the_signal() {
        let (matrix, y) = toy_matrix(60, 4);
        let outcome = train_auto(&matrix, &y, &quick_config()).unwrap();
        assert_eq!(outcome.trials.len(), 6);
        let f1 = outcome.report.metrics["f1_macro"];
        assert!(f1 > 0.9, "f1_macro {f1}");
        assert_eq!(outcome.train_rows.len(), 48);
        assert_eq!(outcome.test_rows.len(), 12);
    }

    #[test]
    fn budget_splits_cover_every_family() {
        assert_eq!(family_budgets(7, 4), vec![2, 2, 2, 1]);
        assert_eq!(family_budgets(4, 4), vec![1, 1, 1, 1]);
        assert_eq!(family_budgets(2, 4), vec![1, 1, 0, 0]);
        let (matrix, y) = toy_matrix(40, 8);
        let outcome = train_auto(&matrix, &y, &quick_config()).unwrap();
        let seen: std::collections::BTreeSet<&str> = outcome
            .trials
            .iter()
            .filter_map(|t| t.params.get("estimator").and_then(|v| v.as_str()))
            .collect();
        assert_eq!(seen.len(), 2, "both families tried: {seen:?}");
    }

    #[test]
    fn trial_records_satisfy_mean_invariant() {
        let (matrix, y) = toy_matrix(40, 2);
        let outcome = train_auto(&matrix, &y, &quick_config()).unwrap();
        for t in &outcome.trials {
            if !t.failed {
                let mean = t.cv_scores.iter().sum::<f64>() / t.cv_scores.len() as f64;
                assert!((mean - t.mean_score).abs() <= 1e-12);
            }
        }
        // Global indices are sequential in run order.
        for (i, t) in outcome.trials.iter().enumerate() {
            assert_eq!(t.trial_index, i);
        }
    }

    #[test]
    fn reruns_are_identical() {
        let (matrix, y) = toy_matrix(50, 6);
        let a = train_auto(&matrix, &y, &quick_config()).unwrap();
        let b = train_auto(&matrix, &y, &quick_config()).unwrap();
        assert_eq!(a.best_trial, b.best_trial);
        assert_eq!(a.pipeline, b.pipeline);
        let log = |o: &TrainOutcome| {
            let mut t = o.trials.clone();
            for r in &mut t {
                r.wall_time = 0.0; // timing is the only permitted difference
            }
            serde_json::to_string(&t).unwrap()
        };
        assert_eq!(log(&a), log(&b));
    }

    #[test]
    fn test_rows_never_shape_the_fit() {
        let (matrix, y) = toy_matrix(50, 3);
        let a = train_auto(&matrix, &y, &quick_config()).unwrap();
        // Corrupt every held-out row's features; the fitted states must not move.
        let mut tampered = matrix.clone();
        for col in &mut tampered.columns {
            if let FeatureColumn::Numeric(v) = col {
                for &r in &a.test_rows {
                    v[r] = Some(9999.0);
                }
            }
        }
        let b = train_auto(&tampered, &y, &quick_config()).unwrap();
        assert_eq!(a.train_rows, b.train_rows);
        assert_eq!(a.pipeline.preprocessor, b.pipeline.preprocessor);
        assert_eq!(a.pipeline.estimator, b.pipeline.estimator);
    }

    #[test]
    fn artifact_round_trips_and_predicts() {
        let (matrix, y) = toy_matrix(40, 5);
        let outcome = train_auto(&matrix, &y, &quick_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        outcome.pipeline.save(&path).unwrap();
        let loaded = FittedPipeline::load(&path).unwrap();
        assert_eq!(loaded, outcome.pipeline);
        let rows: Vec<usize> = (0..matrix.row_count()).collect();
        assert_eq!(
            loaded.predict(&matrix, &rows).unwrap(),
            outcome.pipeline.predict(&matrix, &rows).unwrap()
        );
    }

    #[test]
    fn predicting_with_wrong_features_errors() {
        let (matrix, y) = toy_matrix(40, 5);
        let outcome = train_auto(&matrix, &y, &quick_config()).unwrap();
        let mut renamed = matrix.clone();
        renamed.features[0].name = "other".into();
        let rows: Vec<usize> = vec![0];
        assert!(matches!(
            outcome.pipeline.predict(&renamed, &rows),
            Err(TrainError::FeatureMismatch { .. })
        ));
    }

    #[test]
    fn regression_path_works() {
        let (matrix, _) = toy_matrix(40, 9);
        // Target is a linear function of the signal column.
        let y: Vec<f64> = match &matrix.columns[0] {
            FeatureColumn::Numeric(v) => v.iter().map(|o| 3.0 * o.unwrap() + 1.0).collect(),
            _ => unreachable!(),
        };
        let config = TrainConfig {
            budget: 4,
            cv_folds: 3,
            estimators: Some(vec!["ridge".into()]),
            ..TrainConfig::new(TaskType::Regression)
        };
        let outcome = train_auto(&matrix, &y, &config).unwrap();
        assert!(outcome.report.metrics["r2"] > 0.99);
    }

    #[test]
    fn metric_task_mismatch_rejected() {
        let (matrix, y) = toy_matrix(20, 1);
        let config = TrainConfig { metric: Metric::Mse, ..quick_config() };
        assert!(matches!(
            train_auto(&matrix, &y, &config),
            Err(TrainError::MetricTaskMismatch { .. })
        ));
    }

    #[test]
    fn data_hash_tracks_content() {
        let (matrix, y) = toy_matrix(10, 0);
        let h1 = data_hash(&matrix, &y);
        assert_eq!(h1, data_hash(&matrix, &y));
        let mut other = matrix.clone();
        if let FeatureColumn::Numeric(v) = &mut other.columns[0] {
            v[0] = Some(123.0);
        }
        assert_ne!(h1, data_hash(&other, &y));
    }
}

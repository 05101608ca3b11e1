//! Automated model search over the feature matrix.
//!
//! A pipeline is always impute → one-hot → min-max scale → estimator. The
//! estimator family and its hyperparameters are chosen by sequential
//! model-based optimization ([`tuner`]) with stratified cross-validation
//! ([`cv`]) inside a held-out training split, and the winner ships as a
//! self-contained JSON artifact ([`pipeline::FittedPipeline`]).

pub mod cv;
pub mod estimators;
pub mod pipeline;
pub mod preprocess;
pub mod tuner;

pub use cv::{cross_validate, stratified_kfold, train_test_split, CvError, CvOutcome, Metric};
pub use estimators::{registry, EstimatorError, FittedEstimator};
pub use pipeline::{
    data_hash, train_auto, tune, FittedPipeline, PipelineSpec, TrainConfig, TrainError,
    TrainOutcome, TrainingMetadata,
};
pub use preprocess::Preprocessor;
pub use tuner::{
    optimize, write_trial_log, Domain, ParamValue, Params, SearchSpace, Trial, TrialRecord,
    TuneError,
};

//! File-backed configuration.
//!
//! A run can be described entirely in one YAML file; every key here has a
//! matching command-line flag, and the flag always wins when both are given.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

/// Every setting the binary understands. All fields optional so a config
/// file only has to mention what it changes.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub schema: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Problem name: noshow, los_classification, los_regression,
    /// readmission, diagnosis, mortality.
    pub problem: Option<String>,
    /// Readmission window, e.g. `30d`.
    pub window: Option<String>,
    pub threshold_days: Option<i64>,
    pub diagnosis_code: Option<String>,
    /// Cutoff offset from the anchor, e.g. `-1d`.
    pub offset: Option<String>,
    pub depth: Option<usize>,
    pub agg: Option<Vec<String>>,
    pub trans: Option<Vec<String>>,
    pub task: Option<String>,
    pub metric: Option<String>,
    pub budget: Option<usize>,
    pub cv: Option<usize>,
    pub seed: Option<u64>,
    pub train_ratio: Option<f64>,
    pub estimators: Option<Vec<String>>,
    /// Distribution expectations file for the auditor.
    pub expect: Option<PathBuf>,
    /// `entity.variable` flags to summarize as cohort rates.
    pub binary_variables: Option<Vec<String>>,
    pub bootstrap: Option<usize>,
    pub jobs: Option<usize>,
    // Generator settings.
    pub shape: Option<String>,
    pub patients: Option<usize>,
    pub events: Option<usize>,
    pub rates: Option<BTreeMap<String, f64>>,
}

impl FileConfig {
    /// Loads a YAML config; unknown keys are rejected so typos surface
    /// immediately instead of silently falling back to defaults.
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config `{}`: {e}", path.display()))?;
        serde_yaml::from_str(&text).map_err(|e| format!("config `{}`: {e}", path.display()))
    }
}

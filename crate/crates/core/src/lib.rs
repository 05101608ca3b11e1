//! Automated machine learning over relational electronic health records.
//!
//! The crate turns a directory of CSV extracts plus a schema description
//! into a trained predictive model in five steps:
//!
//! 1. [`assemble`] loads whatever subset of the schema is present on disk
//!    into an acyclic [`table::EntitySet`];
//! 2. [`audit`] summarizes data quality before any modeling happens;
//! 3. [`problems`] turns rows into `(entity, cutoff time, label)` triples
//!    for one of the predefined prediction problems;
//! 4. [`featurize`] synthesizes a feature matrix, using only data visible
//!    strictly before each cutoff time;
//! 5. [`automl`] searches preprocessing + estimator pipelines and
//!    [`metrics`] / [`report`] audit the winner.
//!
//! Everything is deterministic under a fixed seed: assembling, labeling,
//! featurizing, and tuning twice from the same inputs produces
//! byte-identical artifacts.

pub mod assemble;
pub mod audit;
pub mod automl;
pub mod featurize;
pub mod metrics;
pub mod problems;
pub mod report;
pub mod schema;
pub mod synth;
pub mod table;

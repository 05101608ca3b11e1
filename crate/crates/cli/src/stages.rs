//! Stage implementations shared by the single-stage subcommands and `run`.
//!
//! Each function does one stage's work against in-memory inputs; the callers
//! in `main.rs` decide which artifacts to read and write around them, so a
//! stage behaves identically whether it was fed by a prior in-process stage
//! or by a file from an earlier invocation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ehrml::assemble::{assemble, AssemblyManifest};
use ehrml::audit::{AuditReport, ExpectationSet};
use ehrml::automl::{train_auto, Metric, TrainConfig, TrainOutcome};
use ehrml::featurize::{
    compute_feature_matrix, enumerate_features, AggPrimitive, FeatureManifest, FeatureMatrix,
    TransformPrimitive,
};
use ehrml::problems::{generate_label_times, LabelTimes, ProblemSpec, TaskType};
use ehrml::schema::{load_schema, SchemaRegistry};
use ehrml::table::EntitySet;

pub fn load_registry(schema: &Path) -> Result<SchemaRegistry> {
    load_schema(schema).with_context(|| format!("schema `{}`", schema.display()))
}

pub fn assemble_stage(data: &Path, registry: &SchemaRegistry) -> Result<(EntitySet, AssemblyManifest)> {
    let entityset = assemble(data, registry).with_context(|| format!("data dir `{}`", data.display()))?;
    let manifest = AssemblyManifest::from_entityset(&entityset);
    Ok((entityset, manifest))
}

pub fn audit_stage(
    entityset: &EntitySet,
    expect: Option<&Path>,
    binary_variables: &[String],
) -> Result<AuditReport> {
    let expectations = match expect {
        Some(path) => {
            Some(ExpectationSet::load(path).with_context(|| format!("expectations `{}`", path.display()))?)
        }
        None => None,
    };
    Ok(AuditReport::build(entityset, expectations.as_ref(), binary_variables)?)
}

pub fn label_stage(entityset: &EntitySet, spec: &ProblemSpec) -> Result<LabelTimes> {
    Ok(generate_label_times(entityset, spec)?)
}

pub fn featurize_stage(
    entityset: &EntitySet,
    labels: &LabelTimes,
    aggs: &[AggPrimitive],
    trans: &[TransformPrimitive],
    depth: usize,
) -> Result<(FeatureManifest, FeatureMatrix)> {
    let spec = &labels.problem;
    let defs = enumerate_features(
        entityset,
        &spec.target_entity,
        aggs,
        trans,
        depth,
        &spec.excluded_variables(),
    )?;
    let matrix = compute_feature_matrix(entityset, labels, &defs)?;
    let manifest = FeatureManifest {
        target_entity: spec.target_entity.clone(),
        max_depth: depth,
        features: defs,
    };
    Ok((manifest, matrix))
}

pub fn train_stage(matrix: &FeatureMatrix, y: &[f64], config: &TrainConfig) -> Result<TrainOutcome> {
    Ok(train_auto(matrix, y, config)?)
}

// ---------------------------------------------------------------------------
// Artifact plumbing

/// The feature-definition sidecar written next to a feature CSV:
/// `features.csv` → `features.manifest.json`.
pub fn manifest_sidecar(features: &Path) -> PathBuf {
    features.with_extension("manifest.json")
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing `{}`", path.display()))
}

/// Reads `entity_id,cutoff_time,label` (or any CSV whose first column is the
/// id and last column the label) into id → label pairs.
pub fn read_label_pairs(path: &Path) -> Result<Vec<(String, f64)>> {
    let mut reader =
        csv::Reader::from_path(path).with_context(|| format!("labels `{}`", path.display()))?;
    let mut pairs = Vec::new();
    for record in reader.records() {
        let record = record.with_context(|| format!("labels `{}`", path.display()))?;
        let id = record.get(0).unwrap_or("").to_owned();
        let raw = record.get(record.len().saturating_sub(1)).unwrap_or("");
        let label: f64 = raw
            .parse()
            .with_context(|| format!("labels `{}`: bad label `{raw}` for `{id}`", path.display()))?;
        pairs.push((id, label));
    }
    Ok(pairs)
}

/// Labels reordered to match the matrix rows, keyed by entity id, so a label
/// file does not have to be in the same row order as the feature file.
pub fn align_labels(matrix: &FeatureMatrix, pairs: &[(String, f64)]) -> Result<Vec<f64>> {
    let mut by_id: BTreeMap<&str, f64> = BTreeMap::new();
    for (id, label) in pairs {
        if let Some(prev) = by_id.insert(id.as_str(), *label) {
            if prev != *label {
                bail!("label file lists `{id}` twice with different labels");
            }
        }
    }
    matrix
        .entity_ids
        .iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .copied()
                .ok_or_else(|| anyhow::anyhow!("no label for feature row `{id}`"))
        })
        .collect()
}

/// All-rows index list for whole-matrix prediction.
pub fn all_rows(matrix: &FeatureMatrix) -> Vec<usize> {
    (0..matrix.row_count()).collect()
}

pub fn parse_task(text: &str) -> Result<TaskType, String> {
    match text {
        "binary" => Ok(TaskType::Binary),
        "regression" => Ok(TaskType::Regression),
        other => Err(format!("unknown task `{other}` (expected binary or regression)")),
    }
}

pub fn parse_metric(text: &str) -> Result<Metric, String> {
    text.parse::<Metric>().map_err(|_| {
        format!("unknown metric `{text}` (expected accuracy, f1_macro, auc, mse, mae, or r2)")
    })
}

pub fn parse_aggs(names: &[String]) -> Result<Vec<AggPrimitive>, String> {
    names
        .iter()
        .map(|n| n.parse::<AggPrimitive>().map_err(|_| format!("unknown aggregation primitive `{n}`")))
        .collect()
}

pub fn parse_trans(names: &[String]) -> Result<Vec<TransformPrimitive>, String> {
    names
        .iter()
        .map(|n| n.parse::<TransformPrimitive>().map_err(|_| format!("unknown transform primitive `{n}`")))
        .collect()
}

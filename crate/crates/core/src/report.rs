//! Run-level reporting: the metadata summary (loaded variables/resources,
//! training examples, class ratios, feature count) and assembly of every
//! stage's section into one human-readable document.

use serde::{Deserialize, Serialize};

use crate::assemble::AssemblyManifest;
use crate::audit::AuditReport;
use crate::featurize::FeatureMatrix;
use crate::metrics::MetricReport;
use crate::problems::{LabelTimes, ProblemDefinition};
use crate::table::EntitySet;

/// Headline counts for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataReport {
    pub loaded_variables: usize,
    pub loaded_resources: usize,
    pub training_examples: usize,
    /// Binary problems only; omitted when there are no examples.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub positive_ratio_pct: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub negative_ratio_pct: Option<f64>,
    pub generated_features: usize,
}

/// Exact counts from the three stage outputs of a single run.
pub fn metadata_report(
    entityset: &EntitySet,
    label_times: &LabelTimes,
    matrix: &FeatureMatrix,
) -> MetadataReport {
    let positive = label_times.positive_ratio().map(|r| r * 100.0);
    MetadataReport {
        loaded_variables: entityset.loaded_variable_count(),
        loaded_resources: entityset.entities.len(),
        training_examples: label_times.rows.len(),
        positive_ratio_pct: positive,
        negative_ratio_pct: positive.map(|p| 100.0 - p),
        generated_features: matrix.features.len(),
    }
}

impl MetadataReport {
    pub fn to_text(&self) -> String {
        let mut out = String::from("Metadata\n");
        out.push_str(&format!("  No. of loaded variables    {}\n", self.loaded_variables));
        out.push_str(&format!("  No. of loaded resources    {}\n", self.loaded_resources));
        out.push_str(&format!("  No. training examples      {}\n", self.training_examples));
        if let (Some(p), Some(n)) = (self.positive_ratio_pct, self.negative_ratio_pct) {
            out.push_str(&format!("  Positive classes ratio (%) {p:.2}\n"));
            out.push_str(&format!("  Negative classes ratio (%) {n:.2}\n"));
        }
        out.push_str(&format!("  No. generated features     {}\n", self.generated_features));
        out
    }
}

fn definition_text(def: &ProblemDefinition) -> String {
    let mut out = String::from("Problem Definition\n");
    out.push_str(&format!("  Problem                    {}\n", def.problem));
    out.push_str(&format!("  Target entity              {}\n", def.target_entity));
    out.push_str(&format!("  Task type                  {}\n", def.task_type));
    out.push_str(&format!("  Label rows                 {}\n", def.rows));
    out.push_str(&format!("  Excluded rows              {}\n", def.excluded));
    if let Some(p) = def.positive_ratio_pct {
        out.push_str(&format!("  Positive classes ratio (%) {p:.2}\n"));
    }
    if let Some(m) = def.label_mean {
        out.push_str(&format!("  Label mean                 {m:.4}\n"));
    }
    out
}

/// All sections a finished run can report on; absent stages are skipped.
#[derive(Debug, Default)]
pub struct RunReport<'a> {
    pub manifest: Option<&'a AssemblyManifest>,
    pub audit: Option<&'a AuditReport>,
    pub definition: Option<&'a ProblemDefinition>,
    pub metadata: Option<&'a MetadataReport>,
    pub metrics: Option<&'a MetricReport>,
}

impl RunReport<'_> {
    pub fn to_text(&self) -> String {
        let mut sections: Vec<String> = Vec::new();
        if let Some(m) = self.manifest {
            sections.push(m.to_text());
        }
        if let Some(a) = self.audit {
            sections.push(a.to_text());
        }
        if let Some(d) = self.definition {
            sections.push(definition_text(d));
        }
        if let Some(m) = self.metadata {
            sections.push(m.to_text());
        }
        if let Some(m) = self.metrics {
            sections.push(m.to_text());
        }
        sections.join("\n")
    }
}

/// Macro-F1 of always predicting the majority class; the bar any learned
/// binary model has to clear.
pub fn majority_baseline_f1(y: &[f64]) -> Option<f64> {
    if y.is_empty() {
        return None;
    }
    let positives = y.iter().filter(|&&v| v == 1.0).count();
    let majority = if positives * 2 >= y.len() { 1.0 } else { 0.0 };
    let pred = vec![majority; y.len()];
    crate::metrics::classification_metrics(y, &pred, None)
        .ok()
        .and_then(|r| r.metrics.get("f1_macro").copied())
}

/// One-line run summary for logs.
pub fn summary_line(def: &ProblemDefinition, metadata: &MetadataReport) -> String {
    format!(
        "{} ({}): {} examples, {} features over {} resources",
        def.problem,
        def.task_type,
        metadata.training_examples,
        metadata.generated_features,
        metadata.loaded_resources
    )
}

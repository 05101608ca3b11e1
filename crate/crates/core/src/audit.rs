//! Data auditing: per-variable quality metrics (missing counts) and
//! distribution summaries, optionally checked against an expectation file,
//! plus the binary cohort table.
//!
//! Standard deviations here and everywhere downstream use the population
//! formula (divide by n).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::SemanticType;
use crate::table::{Column, ColumnValues, Entity, EntitySet};

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("expectation names unknown variable {0}")]
    UnknownVariableInExpectations(String),
    #[error("cohort variable {0} is not boolean or 0/1-coded")]
    NonBinaryVariable(String),
    #[error("unknown variable {0}")]
    UnknownVariable(String),
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse expectations: {0}")]
    Parse(String),
}

/// Missing-value accounting for one variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityFinding {
    pub entity: String,
    pub variable: String,
    pub missing_count: usize,
    pub missing_pct: f64,
}

/// Distribution sketch for one variable. Identifier and free-text variables
/// are skipped (unbounded cardinality), so not every column yields one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionFinding {
    pub entity: String,
    pub variable: String,
    pub summary: DistributionSummary,
    pub violations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistributionSummary {
    Numeric {
        min: Option<f64>,
        max: Option<f64>,
        mean: Option<f64>,
        std: Option<f64>,
    },
    Categorical {
        unique_count: usize,
        /// value → fraction of non-null cells; sums to 1 ± 1e-9 when non-empty.
        frequencies: BTreeMap<String, f64>,
    },
    Datetime {
        min: Option<chrono::NaiveDateTime>,
        max: Option<chrono::NaiveDateTime>,
    },
}

/// Per-variable bounds loaded from an expectation file. The file mirrors the
/// schema format:
///
/// ```yaml
/// expectations:
///   patient.age: { min: 0, max: 120 }
///   appointment.status: { allowed: [fulfilled, noshow], max_unique: 4 }
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExpectationSet {
    pub expectations: BTreeMap<String, Expectation>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Expectation {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub allowed: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_unique: Option<usize>,
}

impl ExpectationSet {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, AuditError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| AuditError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_yaml::from_str(&text).map_err(|e| AuditError::Parse(e.to_string()))
    }

    /// Every expectation key must name a loaded `entity.variable`.
    fn validate(&self, entityset: &EntitySet) -> Result<(), AuditError> {
        for key in self.expectations.keys() {
            let Some((entity, variable)) = key.split_once('.') else {
                return Err(AuditError::UnknownVariableInExpectations(key.clone()));
            };
            let found = entityset
                .entity(entity)
                .and_then(|e| e.column(variable))
                .is_some();
            if !found {
                return Err(AuditError::UnknownVariableInExpectations(key.clone()));
            }
        }
        Ok(())
    }
}

/// One finding per (entity, variable) pair, in entity-name then declaration
/// order.
pub fn audit_quality(entityset: &EntitySet) -> Vec<QualityFinding> {
    let mut findings = Vec::new();
    for entity in entityset.entities.values() {
        let rows = entity.row_count();
        for column in entity.columns() {
            let missing_count = (0..rows).filter(|&r| column.values.is_null(r)).count();
            let missing_pct = if rows == 0 {
                0.0
            } else {
                missing_count as f64 / rows as f64
            };
            findings.push(QualityFinding {
                entity: entity.name.clone(),
                variable: column.decl.name.clone(),
                missing_count,
                missing_pct,
            });
        }
    }
    findings
}

pub fn audit_distributions(
    entityset: &EntitySet,
    expectations: Option<&ExpectationSet>,
) -> Result<Vec<DistributionFinding>, AuditError> {
    if let Some(set) = expectations {
        set.validate(entityset)?;
    }
    let mut findings = Vec::new();
    for entity in entityset.entities.values() {
        for column in entity.columns() {
            let summary = match summarize(entity, column) {
                Some(s) => s,
                None => continue,
            };
            let key = format!("{}.{}", entity.name, column.decl.name);
            let expectation = expectations.and_then(|set| set.expectations.get(&key));
            let violations = expectation
                .map(|e| check_expectation(&key, &summary, e))
                .unwrap_or_default();
            findings.push(DistributionFinding {
                entity: entity.name.clone(),
                variable: column.decl.name.clone(),
                summary,
                violations,
            });
        }
    }
    Ok(findings)
}

fn summarize(entity: &Entity, column: &Column) -> Option<DistributionSummary> {
    let rows = entity.row_count();
    match (&column.values, column.decl.semantic) {
        (_, SemanticType::Id | SemanticType::ForeignKey | SemanticType::Text) => None,
        (ColumnValues::Numeric(values), _) => {
            let present: Vec<f64> = values.iter().flatten().copied().collect();
            Some(DistributionSummary::Numeric {
                min: present.iter().copied().reduce(f64::min),
                max: present.iter().copied().reduce(f64::max),
                mean: mean(&present),
                std: population_std(&present),
            })
        }
        (ColumnValues::Datetime(values), _) => Some(DistributionSummary::Datetime {
            min: values.iter().flatten().min().copied(),
            max: values.iter().flatten().max().copied(),
        }),
        (ColumnValues::Boolean(_), _) | (ColumnValues::Text(_), _) => {
            let mut counts: BTreeMap<String, usize> = BTreeMap::new();
            let mut non_null = 0usize;
            for row in 0..rows {
                let key = match &column.values {
                    ColumnValues::Boolean(v) => v[row].map(|b| b.to_string()),
                    ColumnValues::Text(v) => v[row].clone(),
                    _ => unreachable!(),
                };
                if let Some(key) = key {
                    *counts.entry(key).or_insert(0) += 1;
                    non_null += 1;
                }
            }
            let frequencies = counts
                .iter()
                .map(|(k, &c)| (k.clone(), c as f64 / non_null as f64))
                .collect();
            Some(DistributionSummary::Categorical {
                unique_count: counts.len(),
                frequencies: if non_null == 0 { BTreeMap::new() } else { frequencies },
            })
        }
    }
}

fn check_expectation(key: &str, summary: &DistributionSummary, exp: &Expectation) -> Vec<String> {
    let mut violations = Vec::new();
    match summary {
        DistributionSummary::Numeric { min, max, .. } => {
            if let (Some(bound), Some(observed)) = (exp.min, *min) {
                if observed < bound {
                    violations.push(format!("{key}: minimum {observed} below expected min {bound}"));
                }
            }
            if let (Some(bound), Some(observed)) = (exp.max, *max) {
                if observed > bound {
                    violations.push(format!("{key}: maximum {observed} above expected max {bound}"));
                }
            }
        }
        DistributionSummary::Categorical {
            unique_count,
            frequencies,
        } => {
            if let Some(allowed) = &exp.allowed {
                for value in frequencies.keys() {
                    if !allowed.iter().any(|a| a == value) {
                        violations.push(format!("{key}: value `{value}` outside allowed set"));
                    }
                }
            }
            if let Some(bound) = exp.max_unique {
                if *unique_count > bound {
                    violations.push(format!(
                        "{key}: {unique_count} unique values exceed expected max {bound}"
                    ));
                }
            }
        }
        DistributionSummary::Datetime { .. } => {}
    }
    violations
}

/// One row of the binary cohort table; percentages are on the 0–100 scale
/// and sum to 100 whenever the variable has any non-null cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortRow {
    pub variable: String,
    pub negative_pct: f64,
    pub positive_pct: f64,
}

/// Summarizes boolean or 0/1-coded variables, named as `entity.variable`.
pub fn cohort_summary(
    entityset: &EntitySet,
    binary_variables: &[String],
) -> Result<Vec<CohortRow>, AuditError> {
    let mut rows = Vec::new();
    for name in binary_variables {
        let Some((entity_name, variable)) = name.split_once('.') else {
            return Err(AuditError::UnknownVariable(name.clone()));
        };
        let column = entityset
            .entity(entity_name)
            .and_then(|e| e.column(variable))
            .ok_or_else(|| AuditError::UnknownVariable(name.clone()))?;
        let entity = entityset.entity(entity_name).expect("checked above");
        let mut positives = 0usize;
        let mut non_null = 0usize;
        for row in 0..entity.row_count() {
            let flag = match &column.values {
                ColumnValues::Boolean(v) => v[row],
                ColumnValues::Numeric(v) => match v[row] {
                    None => None,
                    Some(x) if x == 0.0 => Some(false),
                    Some(x) if x == 1.0 => Some(true),
                    Some(_) => return Err(AuditError::NonBinaryVariable(name.clone())),
                },
                _ => return Err(AuditError::NonBinaryVariable(name.clone())),
            };
            if let Some(flag) = flag {
                non_null += 1;
                if flag {
                    positives += 1;
                }
            }
        }
        let (negative_pct, positive_pct) = if non_null == 0 {
            (0.0, 0.0)
        } else {
            let positive = positives as f64 / non_null as f64 * 100.0;
            (100.0 - positive, positive)
        };
        rows.push(CohortRow {
            variable: name.clone(),
            negative_pct,
            positive_pct,
        });
    }
    Ok(rows)
}

/// Everything the `audit` subcommand emits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditReport {
    pub quality: Vec<QualityFinding>,
    pub distributions: Vec<DistributionFinding>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub cohort: Vec<CohortRow>,
}

impl AuditReport {
    pub fn build(
        entityset: &EntitySet,
        expectations: Option<&ExpectationSet>,
        binary_variables: &[String],
    ) -> Result<Self, AuditError> {
        Ok(AuditReport {
            quality: audit_quality(entityset),
            distributions: audit_distributions(entityset, expectations)?,
            cohort: cohort_summary(entityset, binary_variables)?,
        })
    }

    pub fn violation_count(&self) -> usize {
        self.distributions.iter().map(|d| d.violations.len()).sum()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("Data auditor (std = population formula)\n");
        out.push_str("  Missing values\n");
        for q in &self.quality {
            out.push_str(&format!(
                "    {:<40} {:>6}  ({:.2}%)\n",
                format!("{}.{}", q.entity, q.variable),
                q.missing_count,
                q.missing_pct * 100.0
            ));
        }
        out.push_str("  Distributions\n");
        for d in &self.distributions {
            let name = format!("{}.{}", d.entity, d.variable);
            match &d.summary {
                DistributionSummary::Numeric { min, max, mean, std } => {
                    out.push_str(&format!(
                        "    {name:<40} numeric min={} max={} mean={} std={}\n",
                        fmt_opt(*min),
                        fmt_opt(*max),
                        fmt_opt(*mean),
                        fmt_opt(*std)
                    ));
                }
                DistributionSummary::Categorical {
                    unique_count,
                    frequencies,
                } => {
                    let freqs: Vec<String> = frequencies
                        .iter()
                        .map(|(k, v)| format!("{k}: {:.2}%", v * 100.0))
                        .collect();
                    out.push_str(&format!(
                        "    {name:<40} categorical unique={unique_count} [{}]\n",
                        freqs.join(", ")
                    ));
                }
                DistributionSummary::Datetime { min, max } => {
                    let fmt_time = |t: &Option<chrono::NaiveDateTime>| {
                        t.map(|t| t.format("%Y-%m-%dT%H:%M:%S").to_string())
                            .unwrap_or_else(|| "-".into())
                    };
                    out.push_str(&format!(
                        "    {name:<40} datetime min={} max={}\n",
                        fmt_time(min),
                        fmt_time(max)
                    ));
                }
            }
            for violation in &d.violations {
                out.push_str(&format!("      VIOLATION {violation}\n"));
            }
        }
        if !self.cohort.is_empty() {
            out.push_str("  Cohort\n");
            for row in &self.cohort {
                out.push_str(&format!(
                    "    {:<40} {:>6.2}% {:>6.2}%\n",
                    row.variable, row.negative_pct, row.positive_pct
                ));
            }
        }
        out
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

pub(crate) fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

pub(crate) fn population_std(values: &[f64]) -> Option<f64> {
    let mu = mean(values)?;
    let var = values.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / values.len() as f64;
    Some(var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::parse_schema;
    use crate::table::{Column, ColumnValues, Entity};
    use crate::schema::VariableDecl;
    use std::collections::BTreeMap;

    fn text_col(name: &str, semantic: SemanticType, values: Vec<Option<&str>>) -> Column {
        Column {
            decl: VariableDecl {
                name: name.into(),
                semantic,
                nullable: true,
            },
            values: ColumnValues::Text(values.into_iter().map(|v| v.map(String::from)).collect()),
        }
    }

    fn numeric_col(name: &str, values: Vec<Option<f64>>) -> Column {
        Column {
            decl: VariableDecl {
                name: name.into(),
                semantic: SemanticType::Numeric,
                nullable: true,
            },
            values: ColumnValues::Numeric(values),
        }
    }

    fn small_entityset() -> EntitySet {
        let ids = text_col(
            "id",
            SemanticType::Id,
            vec![Some("a"), Some("b"), Some("c"), Some("d"), Some("e")],
        );
        let value = numeric_col("value", vec![Some(1.0), None, Some(3.0), None, Some(5.0)]);
        let class = text_col(
            "class",
            SemanticType::Categorical,
            vec![Some("a"), Some("a"), Some("b"), None, None],
        );
        let entity = Entity::new("obs", "id", None, vec![ids, value, class]).unwrap();
        EntitySet {
            entities: BTreeMap::from([("obs".into(), entity)]),
            relations: vec![],
            notes: vec![],
        }
    }

    #[test]
    fn quality_counts_exact() {
        let findings = audit_quality(&small_entityset());
        assert_eq!(findings.len(), 3);
        let value = findings.iter().find(|f| f.variable == "value").unwrap();
        assert_eq!(value.missing_count, 2);
        assert!((value.missing_pct - 0.4).abs() < 1e-12);
        let id = findings.iter().find(|f| f.variable == "id").unwrap();
        assert_eq!((id.missing_count, id.missing_pct), (0, 0.0));
    }

    #[test]
    fn zero_row_entity_reports_zero() {
        let entity = Entity::new(
            "empty",
            "id",
            None,
            vec![text_col("id", SemanticType::Id, vec![])],
        )
        .unwrap();
        let es = EntitySet {
            entities: BTreeMap::from([("empty".into(), entity)]),
            relations: vec![],
            notes: vec![],
        };
        let findings = audit_quality(&es);
        assert_eq!(findings[0].missing_count, 0);
        assert_eq!(findings[0].missing_pct, 0.0);
    }

    #[test]
    fn numeric_distribution_uses_population_std() {
        let es = small_entityset();
        let findings = audit_distributions(&es, None).unwrap();
        let value = findings.iter().find(|f| f.variable == "value").unwrap();
        match &value.summary {
            DistributionSummary::Numeric { min, max, mean, std } => {
                assert_eq!(*min, Some(1.0));
                assert_eq!(*max, Some(5.0));
                assert_eq!(*mean, Some(3.0));
                // population std of [1,3,5]: sqrt(8/3)
                assert!((std.unwrap() - (8.0f64 / 3.0).sqrt()).abs() < 1e-12);
            }
            other => panic!("expected numeric summary, got {other:?}"),
        }
    }

    #[test]
    fn categorical_frequencies_sum_to_one() {
        let findings = audit_distributions(&small_entityset(), None).unwrap();
        let class = findings.iter().find(|f| f.variable == "class").unwrap();
        match &class.summary {
            DistributionSummary::Categorical {
                unique_count,
                frequencies,
            } => {
                assert_eq!(*unique_count, 2);
                assert!((frequencies["a"] - 2.0 / 3.0).abs() < 1e-9);
                assert!((frequencies["b"] - 1.0 / 3.0).abs() < 1e-9);
                let total: f64 = frequencies.values().sum();
                assert!((total - 1.0).abs() < 1e-9);
            }
            other => panic!("expected categorical summary, got {other:?}"),
        }
        // Identifier columns get no distribution finding.
        assert!(findings.iter().all(|f| f.variable != "id"));
    }

    #[test]
    fn expectations_flag_violations() {
        let es = small_entityset();
        let yaml = "
expectations:
  obs.value: { min: 2 }
  obs.class: { allowed: [a], max_unique: 1 }
";
        let set: ExpectationSet = serde_yaml::from_str(yaml).unwrap();
        let findings = audit_distributions(&es, Some(&set)).unwrap();
        let value = findings.iter().find(|f| f.variable == "value").unwrap();
        assert_eq!(value.violations.len(), 1);
        assert!(value.violations[0].contains("obs.value"));
        let class = findings.iter().find(|f| f.variable == "class").unwrap();
        assert_eq!(class.violations.len(), 2);
    }

    #[test]
    fn unknown_expectation_variable_rejected() {
        let set: ExpectationSet =
            serde_yaml::from_str("expectations:\n  obs.nope: { min: 0 }\n").unwrap();
        let err = audit_distributions(&small_entityset(), Some(&set)).unwrap_err();
        assert!(matches!(err, AuditError::UnknownVariableInExpectations(_)));
    }

    #[test]
    fn cohort_rates() {
        let flags = numeric_col("flag", vec![Some(1.0), Some(0.0), Some(0.0), Some(0.0)]);
        let ids = text_col(
            "id",
            SemanticType::Id,
            vec![Some("a"), Some("b"), Some("c"), Some("d")],
        );
        let entity = Entity::new("p", "id", None, vec![ids, flags]).unwrap();
        let es = EntitySet {
            entities: BTreeMap::from([("p".into(), entity)]),
            relations: vec![],
            notes: vec![],
        };
        let rows = cohort_summary(&es, &["p.flag".into()]).unwrap();
        assert!((rows[0].negative_pct - 75.0).abs() < 1e-9);
        assert!((rows[0].positive_pct - 25.0).abs() < 1e-9);
        assert!((rows[0].negative_pct + rows[0].positive_pct - 100.0).abs() < 1e-9);

        let err = cohort_summary(&es, &["p.id".into()]).unwrap_err();
        assert!(matches!(err, AuditError::NonBinaryVariable(_)));
    }

    #[test]
    fn all_negative_cohort() {
        let flags = numeric_col("flag", vec![Some(0.0), Some(0.0)]);
        let ids = text_col("id", SemanticType::Id, vec![Some("a"), Some("b")]);
        let entity = Entity::new("p", "id", None, vec![ids, flags]).unwrap();
        let es = EntitySet {
            entities: BTreeMap::from([("p".into(), entity)]),
            relations: vec![],
            notes: vec![],
        };
        let rows = cohort_summary(&es, &["p.flag".into()]).unwrap();
        assert_eq!((rows[0].negative_pct, rows[0].positive_pct), (100.0, 0.0));
    }

    #[test]
    fn audit_does_not_mutate() {
        let es = small_entityset();
        let before = serde_json::to_string(&es).unwrap();
        let _ = audit_quality(&es);
        let _ = audit_distributions(&es, None).unwrap();
        let after = serde_json::to_string(&es).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn report_renders_and_roundtrips() {
        let report = AuditReport::build(&small_entityset(), None, &[]).unwrap();
        let text = report.to_text();
        assert!(text.contains("obs.value"));
        assert!(text.contains("population"));
        let json = serde_json::to_string(&report).unwrap();
        let back: AuditReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.quality, report.quality);
    }

    #[test]
    fn schema_driven_usage_compiles() {
        // Sanity: findings line up with a loaded schema's declarations.
        let registry = parse_schema(
            "
resources:
  p:
    primary_key: id
    variables:
      id: id
      flag: boolean
",
        )
        .unwrap();
        assert_eq!(registry.resources["p"].variables.len(), 2);
    }
}

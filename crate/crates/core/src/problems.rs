//! Prediction-problem library: turns rows of a target entity into
//! `(entity_id, cutoff_time, label)` triples.
//!
//! Every cutoff time is `anchor + offset` where the anchor is either the
//! event's start or its end. Labels come from a stored column when the data
//! already carries the outcome, otherwise from the problem's labeling
//! function, which may consult the whole entityset — labeling is allowed to
//! see the future, features are not.
//!
//! Six problems ship predefined: `noshow`, `los_classification`,
//! `los_regression`, `readmission`, `diagnosis`, and `mortality`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::{Duration, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::table::{Entity, EntitySet};

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("unknown problem `{0}`")]
    UnknownProblem(String),
    #[error("target entity `{0}` is not in the entityset")]
    UnknownTargetEntity(String),
    #[error("problem `{problem}` requires parameter `{param}`")]
    MissingParam { problem: String, param: String },
    #[error("{entity} has no loaded column `{column}`")]
    MissingColumn { entity: String, column: String },
    #[error("readmission cutoffs must not fall after discharge; offset must be <= 0")]
    InvalidOffset,
    #[error("cannot parse duration `{0}`; use forms like 30d, 48h, 90m, 3600s")]
    BadDuration(String),
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse label times: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemName {
    Noshow,
    LosClassification,
    LosRegression,
    Readmission,
    Diagnosis,
    Mortality,
}

impl ProblemName {
    pub const ALL: [ProblemName; 6] = [
        ProblemName::Noshow,
        ProblemName::LosClassification,
        ProblemName::LosRegression,
        ProblemName::Readmission,
        ProblemName::Diagnosis,
        ProblemName::Mortality,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ProblemName::Noshow => "noshow",
            ProblemName::LosClassification => "los_classification",
            ProblemName::LosRegression => "los_regression",
            ProblemName::Readmission => "readmission",
            ProblemName::Diagnosis => "diagnosis",
            ProblemName::Mortality => "mortality",
        }
    }
}

impl fmt::Display for ProblemName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProblemName {
    type Err = ProblemError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ProblemName::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| ProblemError::UnknownProblem(s.to_owned()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    EventStart,
    EventEnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    Binary,
    Regression,
}

/// Serialize `chrono::Duration` as whole seconds.
mod duration_secs {
    use chrono::Duration;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        d.num_seconds().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::seconds(i64::deserialize(d)?))
    }
}

/// Parses durations of the form `30d`, `48h`, `90m`, `3600s`, or `0`.
pub fn parse_duration(text: &str) -> Result<Duration, ProblemError> {
    let text = text.trim();
    if text == "0" {
        return Ok(Duration::zero());
    }
    let (number, unit) = text.split_at(text.len().saturating_sub(1));
    let value: i64 = number
        .parse()
        .map_err(|_| ProblemError::BadDuration(text.to_owned()))?;
    match unit {
        "d" => Ok(Duration::days(value)),
        "h" => Ok(Duration::hours(value)),
        "m" => Ok(Duration::minutes(value)),
        "s" => Ok(Duration::seconds(value)),
        _ => Err(ProblemError::BadDuration(text.to_owned())),
    }
}

/// Knobs for the individual labelers. Defaults follow the bundled schemas'
/// naming conventions; override any of them for bespoke data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProblemParams {
    /// Readmission window after discharge; the boundary day counts (closed
    /// interval).
    #[serde(with = "duration_secs")]
    pub readmission_window: Duration,
    /// Stays strictly longer than this many days are long-stay positives.
    pub threshold_days: i64,
    /// Code an encounter must carry for the diagnosis problem.
    pub diagnosis_code: Option<String>,
    /// Code *prefixes* that mark a death-related diagnosis: transport
    /// accidents (V..), self-harm and assault (X6..–Y0..).
    pub mortality_codes: Vec<String>,
    /// Stored outcome column for `noshow`.
    pub label_column: String,
    /// Status values (case-insensitive) that count as a missed appointment.
    pub noshow_positive_values: Vec<String>,
    /// Discharge-time column used when the anchor is `event_end`.
    pub end_variable: String,
    /// Foreign key linking the target entity to its patient; inferred from
    /// the relations when unset.
    pub patient_column: Option<String>,
    /// Entity + column carrying diagnosis codes for `diagnosis`/`mortality`.
    pub code_entity: String,
    pub code_column: String,
    /// Stored death flag consulted first by `mortality`.
    pub mortality_column: String,
    /// Overrides the anchor variable (default: the target's time index for
    /// `event_start`, `end_variable` for `event_end`).
    pub anchor_variable: Option<String>,
}

impl Default for ProblemParams {
    fn default() -> Self {
        ProblemParams {
            readmission_window: Duration::days(30),
            threshold_days: 7,
            diagnosis_code: None,
            mortality_codes: ["V", "X6", "X7", "X8", "X9", "Y0"]
                .map(String::from)
                .to_vec(),
            label_column: "status".into(),
            noshow_positive_values: ["noshow", "no-show", "yes"].map(String::from).to_vec(),
            end_variable: "end".into(),
            patient_column: None,
            code_entity: "diagnosis".into(),
            code_column: "code".into(),
            mortality_column: "mortality".into(),
            anchor_variable: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub name: ProblemName,
    pub target_entity: String,
    pub anchor: Anchor,
    #[serde(with = "duration_secs")]
    pub offset: Duration,
    pub task_type: TaskType,
    #[serde(default)]
    pub params: ProblemParams,
}

impl ProblemSpec {
    /// The stock configuration for one of the six predefined problems.
    pub fn predefined(name: ProblemName) -> Self {
        let (target, anchor, task) = match name {
            ProblemName::Noshow => ("appointment", Anchor::EventStart, TaskType::Binary),
            ProblemName::LosClassification => ("encounter", Anchor::EventStart, TaskType::Binary),
            ProblemName::LosRegression => ("encounter", Anchor::EventStart, TaskType::Regression),
            ProblemName::Readmission => ("encounter", Anchor::EventEnd, TaskType::Binary),
            ProblemName::Diagnosis => ("encounter", Anchor::EventStart, TaskType::Binary),
            ProblemName::Mortality => ("encounter", Anchor::EventStart, TaskType::Binary),
        };
        ProblemSpec {
            name,
            target_entity: target.into(),
            anchor,
            offset: Duration::zero(),
            task_type: task,
            params: ProblemParams::default(),
        }
    }

    /// Name of the datetime column the cutoff anchors to.
    pub fn anchor_variable<'a>(&'a self, target: &'a Entity) -> Result<&'a str, ProblemError> {
        if let Some(var) = &self.params.anchor_variable {
            return Ok(var.as_str());
        }
        match self.anchor {
            Anchor::EventStart => target
                .time_index
                .as_deref()
                .ok_or_else(|| ProblemError::MissingColumn {
                    entity: target.name.clone(),
                    column: "<time index>".into(),
                }),
            Anchor::EventEnd => Ok(self.params.end_variable.as_str()),
        }
    }

    /// Variables the featurizer must never see because they encode the label
    /// (or data at/after the label horizon) directly.
    pub fn excluded_variables(&self) -> Vec<(String, String)> {
        match self.name {
            ProblemName::Noshow => vec![(self.target_entity.clone(), self.params.label_column.clone())],
            ProblemName::LosClassification | ProblemName::LosRegression => {
                vec![(self.target_entity.clone(), self.params.end_variable.clone())]
            }
            ProblemName::Readmission => vec![],
            ProblemName::Diagnosis => vec![],
            ProblemName::Mortality => {
                vec![(self.target_entity.clone(), self.params.mortality_column.clone())]
            }
        }
    }
}

/// Anchor timestamp + offset for one instance of the target entity.
pub fn gct(
    entityset: &EntitySet,
    spec: &ProblemSpec,
    entity_id: &str,
    offset: Duration,
) -> Result<NaiveDateTime, ProblemError> {
    let target = entityset
        .entity(&spec.target_entity)
        .ok_or_else(|| ProblemError::UnknownTargetEntity(spec.target_entity.clone()))?;
    let variable = spec.anchor_variable(target)?;
    let column = target
        .column(variable)
        .ok_or_else(|| ProblemError::MissingColumn {
            entity: target.name.clone(),
            column: variable.to_owned(),
        })?;
    let row = target
        .row_of(entity_id)
        .ok_or_else(|| ProblemError::UnknownTargetEntity(entity_id.to_owned()))?;
    let anchor = column.timestamp(row).ok_or_else(|| ProblemError::MissingColumn {
        entity: target.name.clone(),
        column: format!("{variable} (null for {entity_id})"),
    })?;
    Ok(anchor + offset)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub entity_id: String,
    pub cutoff_time: NaiveDateTime,
    pub label: f64,
}

/// Why a candidate row produced no label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExclusionNote {
    pub entity_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelTimes {
    pub problem: ProblemSpec,
    pub rows: Vec<LabelRow>,
    pub excluded: Vec<ExclusionNote>,
}

impl LabelTimes {
    pub fn positive_ratio(&self) -> Option<f64> {
        match self.problem.task_type {
            TaskType::Binary if !self.rows.is_empty() => Some(
                self.rows.iter().filter(|r| r.label == 1.0).count() as f64 / self.rows.len() as f64,
            ),
            _ => None,
        }
    }

    pub fn label_mean(&self) -> Option<f64> {
        if self.rows.is_empty() {
            None
        } else {
            Some(self.rows.iter().map(|r| r.label).sum::<f64>() / self.rows.len() as f64)
        }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), ProblemError> {
        let path = path.as_ref();
        let mut writer = csv::Writer::from_path(path).map_err(|e| ProblemError::Csv(e.to_string()))?;
        writer
            .write_record(["entity_id", "cutoff_time", "label"])
            .map_err(|e| ProblemError::Csv(e.to_string()))?;
        for row in &self.rows {
            let label = match self.problem.task_type {
                TaskType::Binary => format!("{}", row.label as i64),
                TaskType::Regression => format!("{}", row.label),
            };
            writer
                .write_record([
                    row.entity_id.as_str(),
                    &row.cutoff_time.format("%Y-%m-%dT%H:%M:%S").to_string(),
                    &label,
                ])
                .map_err(|e| ProblemError::Csv(e.to_string()))?;
        }
        writer.flush().map_err(|e| ProblemError::Csv(e.to_string()))?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>, problem: ProblemSpec) -> Result<Self, ProblemError> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path).map_err(|e| ProblemError::Csv(e.to_string()))?;
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| ProblemError::Csv(e.to_string()))?;
            let entity_id = record.get(0).unwrap_or("").to_owned();
            let cutoff = record.get(1).unwrap_or("");
            let cutoff_time = crate::assemble::parse_datetime(cutoff)
                .ok_or_else(|| ProblemError::Csv(format!("bad cutoff time `{cutoff}`")))?;
            let label: f64 = record
                .get(2)
                .unwrap_or("")
                .parse()
                .map_err(|_| ProblemError::Csv(format!("bad label for {entity_id}")))?;
            rows.push(LabelRow {
                entity_id,
                cutoff_time,
                label,
            });
        }
        Ok(LabelTimes {
            problem,
            rows,
            excluded: vec![],
        })
    }

    /// The "Problem Definition" block of the metadata report.
    pub fn definition(&self) -> ProblemDefinition {
        ProblemDefinition {
            problem: self.problem.name.to_string(),
            target_entity: self.problem.target_entity.clone(),
            task_type: match self.problem.task_type {
                TaskType::Binary => "binary classification".into(),
                TaskType::Regression => "regression".into(),
            },
            rows: self.rows.len(),
            excluded: self.excluded.len(),
            positive_ratio_pct: self.positive_ratio().map(|r| r * 100.0),
            label_mean: match self.problem.task_type {
                TaskType::Regression => self.label_mean(),
                TaskType::Binary => None,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemDefinition {
    pub problem: String,
    pub target_entity: String,
    pub task_type: String,
    pub rows: usize,
    pub excluded: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub positive_ratio_pct: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label_mean: Option<f64>,
}

enum Outcome {
    Label(f64),
    Excluded(String),
}

/// One label row per target instance whose anchor time and label both
/// resolve; everything else lands in `excluded` with a reason. Output order
/// is target-entity row order.
pub fn generate_label_times(
    entityset: &EntitySet,
    spec: &ProblemSpec,
) -> Result<LabelTimes, ProblemError> {
    let target = entityset
        .entity(&spec.target_entity)
        .ok_or_else(|| ProblemError::UnknownTargetEntity(spec.target_entity.clone()))?;
    validate_params(spec)?;

    let anchor_var = spec.anchor_variable(target)?;
    let anchor_col = target
        .column(anchor_var)
        .ok_or_else(|| ProblemError::MissingColumn {
            entity: target.name.clone(),
            column: anchor_var.to_owned(),
        })?;

    let labeler = build_labeler(entityset, target, spec)?;
    let mut rows = Vec::new();
    let mut excluded = Vec::new();
    for row in 0..target.row_count() {
        let entity_id = target.key_of(row).to_owned();
        let Some(anchor) = anchor_col.timestamp(row) else {
            excluded.push(ExclusionNote {
                entity_id,
                reason: format!("missing anchor time `{anchor_var}`"),
            });
            continue;
        };
        let cutoff_time = anchor + spec.offset;
        match labeler.label(row, anchor) {
            Outcome::Label(label) => rows.push(LabelRow {
                entity_id,
                cutoff_time,
                label,
            }),
            Outcome::Excluded(reason) => excluded.push(ExclusionNote { entity_id, reason }),
        }
    }
    Ok(LabelTimes {
        problem: spec.clone(),
        rows,
        excluded,
    })
}

fn validate_params(spec: &ProblemSpec) -> Result<(), ProblemError> {
    match spec.name {
        ProblemName::Diagnosis if spec.params.diagnosis_code.is_none() => {
            Err(ProblemError::MissingParam {
                problem: spec.name.to_string(),
                param: "diagnosis_code".into(),
            })
        }
        ProblemName::Readmission if spec.offset > Duration::zero() => Err(ProblemError::InvalidOffset),
        _ => Ok(()),
    }
}

/// Per-problem labeling function, pre-resolved against the entityset so the
/// per-row work stays cheap.
struct Labeler<'a> {
    spec: &'a ProblemSpec,
    target: &'a Entity,
    kind: LabelerKind<'a>,
}

enum LabelerKind<'a> {
    /// Read the stored status column and map it to 0/1.
    Noshow { status: &'a crate::table::Column },
    /// Compare discharge − admission against the threshold (classification)
    /// or emit it in fractional days (regression).
    Los {
        end: &'a crate::table::Column,
        classify: bool,
    },
    /// Another encounter for the same patient starts within the window.
    Readmission {
        patient_fk: &'a crate::table::Column,
        end: &'a crate::table::Column,
        /// patient id → sorted start times of all their encounters.
        starts_by_patient: BTreeMap<String, Vec<NaiveDateTime>>,
    },
    /// The encounter carries a matching code row.
    Codes {
        codes_by_target: BTreeMap<String, Vec<String>>,
        match_prefixes: bool,
        needles: Vec<String>,
    },
    /// Stored boolean flag.
    StoredFlag { flag: &'a crate::table::Column },
}

fn build_labeler<'a>(
    entityset: &'a EntitySet,
    target: &'a Entity,
    spec: &'a ProblemSpec,
) -> Result<Labeler<'a>, ProblemError> {
    let column = |name: &str| {
        target.column(name).ok_or_else(|| ProblemError::MissingColumn {
            entity: target.name.clone(),
            column: name.to_owned(),
        })
    };
    let kind = match spec.name {
        ProblemName::Noshow => LabelerKind::Noshow {
            status: column(&spec.params.label_column)?,
        },
        ProblemName::LosClassification => LabelerKind::Los {
            end: column(&spec.params.end_variable)?,
            classify: true,
        },
        ProblemName::LosRegression => LabelerKind::Los {
            end: column(&spec.params.end_variable)?,
            classify: false,
        },
        ProblemName::Readmission => {
            let fk_name = patient_column(entityset, target, spec)?;
            let patient_fk = column(&fk_name)?;
            let start_col = target
                .time_index
                .as_deref()
                .and_then(|n| target.column(n))
                .ok_or_else(|| ProblemError::MissingColumn {
                    entity: target.name.clone(),
                    column: "<time index>".into(),
                })?;
            let mut starts_by_patient: BTreeMap<String, Vec<NaiveDateTime>> = BTreeMap::new();
            for row in 0..target.row_count() {
                if let (Some(patient), Some(start)) = (patient_fk.text(row), start_col.timestamp(row)) {
                    starts_by_patient.entry(patient.to_owned()).or_default().push(start);
                }
            }
            for starts in starts_by_patient.values_mut() {
                starts.sort();
            }
            LabelerKind::Readmission {
                patient_fk,
                end: column(&spec.params.end_variable)?,
                starts_by_patient,
            }
        }
        ProblemName::Diagnosis => LabelerKind::Codes {
            codes_by_target: codes_by_target(entityset, target, spec)?,
            match_prefixes: false,
            needles: vec![spec
                .params
                .diagnosis_code
                .clone()
                .expect("validated earlier")],
        },
        ProblemName::Mortality => {
            // Algorithm 2's else-branch: prefer the stored outcome when the
            // data carries one.
            if let Some(flag) = target.column(&spec.params.mortality_column) {
                LabelerKind::StoredFlag { flag }
            } else {
                LabelerKind::Codes {
                    codes_by_target: codes_by_target(entityset, target, spec)?,
                    match_prefixes: true,
                    needles: spec.params.mortality_codes.clone(),
                }
            }
        }
    };
    Ok(Labeler { spec, target, kind })
}

/// The foreign key linking the target entity to a patient resource, taken
/// from the active relations unless overridden.
fn patient_column(
    entityset: &EntitySet,
    target: &Entity,
    spec: &ProblemSpec,
) -> Result<String, ProblemError> {
    if let Some(column) = &spec.params.patient_column {
        return Ok(column.clone());
    }
    entityset
        .relations
        .iter()
        .find(|r| r.child_resource == target.name && r.parent_resource == "patient")
        .map(|r| r.child_variable.clone())
        .ok_or_else(|| ProblemError::MissingParam {
            problem: spec.name.to_string(),
            param: "patient_column".into(),
        })
}

/// target id → codes recorded against it in the configured code entity.
fn codes_by_target(
    entityset: &EntitySet,
    target: &Entity,
    spec: &ProblemSpec,
) -> Result<BTreeMap<String, Vec<String>>, ProblemError> {
    let code_entity = entityset
        .entity(&spec.params.code_entity)
        .ok_or_else(|| ProblemError::UnknownTargetEntity(spec.params.code_entity.clone()))?;
    let fk_name = entityset
        .relations
        .iter()
        .find(|r| r.child_resource == code_entity.name && r.parent_resource == target.name)
        .map(|r| r.child_variable.clone())
        .ok_or_else(|| ProblemError::MissingColumn {
            entity: code_entity.name.clone(),
            column: format!("<foreign key to {}>", target.name),
        })?;
    let fk = code_entity
        .column(&fk_name)
        .ok_or_else(|| ProblemError::MissingColumn {
            entity: code_entity.name.clone(),
            column: fk_name.clone(),
        })?;
    let codes = code_entity
        .column(&spec.params.code_column)
        .ok_or_else(|| ProblemError::MissingColumn {
            entity: code_entity.name.clone(),
            column: spec.params.code_column.clone(),
        })?;
    let mut map: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for row in 0..code_entity.row_count() {
        if let (Some(id), Some(code)) = (fk.text(row), codes.text(row)) {
            map.entry(id.to_owned()).or_default().push(code.to_owned());
        }
    }
    Ok(map)
}

impl Labeler<'_> {
    fn label(&self, row: usize, anchor: NaiveDateTime) -> Outcome {
        match &self.kind {
            LabelerKind::Noshow { status } => match status.text(row) {
                None => Outcome::Excluded("missing status".into()),
                Some(value) => {
                    let missed = self
                        .spec
                        .params
                        .noshow_positive_values
                        .iter()
                        .any(|p| p.eq_ignore_ascii_case(value));
                    Outcome::Label(if missed { 1.0 } else { 0.0 })
                }
            },
            LabelerKind::Los { end, classify } => match end.timestamp(row) {
                None => Outcome::Excluded(format!("missing `{}`", self.spec.params.end_variable)),
                Some(discharge) => {
                    let stay = discharge - anchor;
                    if *classify {
                        let long = stay > Duration::days(self.spec.params.threshold_days);
                        Outcome::Label(if long { 1.0 } else { 0.0 })
                    } else {
                        Outcome::Label(stay.num_seconds() as f64 / 86_400.0)
                    }
                }
            },
            LabelerKind::Readmission {
                patient_fk,
                end,
                starts_by_patient,
            } => {
                let Some(discharge) = end.timestamp(row) else {
                    return Outcome::Excluded(format!("missing `{}`", self.spec.params.end_variable));
                };
                let Some(patient) = patient_fk.text(row) else {
                    return Outcome::Excluded("missing patient link".into());
                };
                let horizon = discharge + self.spec.params.readmission_window;
                let starts = starts_by_patient.get(patient).map(Vec::as_slice).unwrap_or(&[]);
                // Next encounter = earliest start strictly after discharge;
                // landing exactly on the window boundary still counts.
                let next = starts.iter().find(|&&s| s > discharge);
                let readmitted = matches!(next, Some(&s) if s <= horizon);
                Outcome::Label(if readmitted { 1.0 } else { 0.0 })
            }
            LabelerKind::Codes {
                codes_by_target,
                match_prefixes,
                needles,
            } => {
                let id = self.target.key_of(row);
                let codes = codes_by_target.get(&id).map(Vec::as_slice).unwrap_or(&[]);
                let hit = codes.iter().any(|code| {
                    needles.iter().any(|needle| {
                        if *match_prefixes {
                            code.starts_with(needle)
                        } else {
                            code == needle
                        }
                    })
                });
                Outcome::Label(if hit { 1.0 } else { 0.0 })
            }
            LabelerKind::StoredFlag { flag } => match flag.boolean(row) {
                None => Outcome::Excluded(format!("missing `{}`", self.spec.params.mortality_column)),
                Some(dead) => Outcome::Label(if dead { 1.0 } else { 0.0 }),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{RelationshipDecl, SemanticType, VariableDecl};
    use crate::table::{Column, ColumnValues};
    use chrono::NaiveDate;

    fn ts(day: u32, hour: u32) -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2012, 3, day)
            .unwrap()
            .and_hms_opt(hour, 0, 0)
            .unwrap()
    }

    fn col(name: &str, semantic: SemanticType, values: ColumnValues) -> Column {
        Column {
            decl: VariableDecl {
                name: name.into(),
                semantic,
                nullable: true,
            },
            values,
        }
    }

    fn text(values: &[Option<&str>]) -> ColumnValues {
        ColumnValues::Text(values.iter().map(|v| v.map(String::from)).collect())
    }

    fn times(values: &[Option<NaiveDateTime>]) -> ColumnValues {
        ColumnValues::Datetime(values.to_vec())
    }

    /// Three patients, five encounters, four diagnosis rows.
    fn hospital() -> EntitySet {
        let encounters = Entity::new(
            "encounter",
            "id",
            Some("start".into()),
            vec![
                col("id", SemanticType::Id, text(&[Some("e1"), Some("e2"), Some("e3"), Some("e4"), Some("e5")])),
                col(
                    "patient",
                    SemanticType::ForeignKey,
                    text(&[Some("p1"), Some("p1"), Some("p2"), Some("p2"), Some("p3")]),
                ),
                col(
                    "start",
                    SemanticType::Datetime,
                    times(&[Some(ts(1, 0)), Some(ts(10, 0)), Some(ts(1, 0)), Some(ts(20, 0)), Some(ts(2, 0))]),
                ),
                col(
                    "end",
                    SemanticType::Datetime,
                    // e1: 4-day stay, readmitted day 10 (within 30d).
                    // e3: 9-day stay, next starts day 20 (within 30d).
                    // e5: no discharge recorded.
                    times(&[Some(ts(5, 0)), Some(ts(12, 0)), Some(ts(10, 0)), Some(ts(28, 0)), None]),
                ),
            ],
        )
        .unwrap();
        let diagnosis = Entity::new(
            "diagnosis",
            "id",
            None,
            vec![
                col("id", SemanticType::Id, text(&[Some("d1"), Some("d2"), Some("d3"), Some("d4")])),
                col(
                    "encounter",
                    SemanticType::ForeignKey,
                    text(&[Some("e1"), Some("e2"), Some("e3"), Some("e4")]),
                ),
                col(
                    "code",
                    SemanticType::Categorical,
                    text(&[Some("I10"), Some("X65"), Some("I10"), Some("E11")]),
                ),
            ],
        )
        .unwrap();
        let patients = Entity::new(
            "patient",
            "id",
            None,
            vec![col("id", SemanticType::Id, text(&[Some("p1"), Some("p2"), Some("p3")]))],
        )
        .unwrap();
        EntitySet {
            entities: [
                ("encounter".to_string(), encounters),
                ("diagnosis".to_string(), diagnosis),
                ("patient".to_string(), patients),
            ]
            .into_iter()
            .collect(),
            relations: vec![
                RelationshipDecl {
                    child_resource: "encounter".into(),
                    child_variable: "patient".into(),
                    parent_resource: "patient".into(),
                    parent_variable: "id".into(),
                },
                RelationshipDecl {
                    child_resource: "diagnosis".into(),
                    child_variable: "encounter".into(),
                    parent_resource: "encounter".into(),
                    parent_variable: "id".into(),
                },
            ],
            notes: vec![],
        }
    }

    #[test]
    fn gct_adds_offset() {
        let es = hospital();
        let spec = ProblemSpec::predefined(ProblemName::LosClassification);
        let t = gct(&es, &spec, "e1", Duration::hours(48)).unwrap();
        assert_eq!(t, ts(3, 0));
        let spec_end = ProblemSpec::predefined(ProblemName::Readmission);
        let t = gct(&es, &spec_end, "e1", Duration::zero()).unwrap();
        assert_eq!(t, ts(5, 0));
        assert!(gct(&es, &spec_end, "e5", Duration::zero()).is_err());
    }

    #[test]
    fn los_classification_strictly_greater() {
        let es = hospital();
        let labels = generate_label_times(&es, &ProblemSpec::predefined(ProblemName::LosClassification)).unwrap();
        // e5 has no discharge: excluded. e1 4d→0, e2 2d→0, e3 9d→1, e4 8d→1.
        assert_eq!(labels.rows.len(), 4);
        assert_eq!(labels.excluded.len(), 1);
        assert_eq!(labels.excluded[0].entity_id, "e5");
        let by_id: BTreeMap<_, _> = labels.rows.iter().map(|r| (r.entity_id.as_str(), r.label)).collect();
        assert_eq!(by_id["e1"], 0.0);
        assert_eq!(by_id["e3"], 1.0);
        assert_eq!(by_id["e4"], 1.0);
        // Cutoffs anchor at admission.
        assert_eq!(labels.rows[0].cutoff_time, ts(1, 0));
    }

    #[test]
    fn exactly_threshold_days_is_negative() {
        let es = hospital();
        let mut spec = ProblemSpec::predefined(ProblemName::LosClassification);
        spec.params.threshold_days = 8; // e4 stays exactly 8 days
        let labels = generate_label_times(&es, &spec).unwrap();
        let e4 = labels.rows.iter().find(|r| r.entity_id == "e4").unwrap();
        assert_eq!(e4.label, 0.0);
    }

    #[test]
    fn los_regression_fractional_days() {
        let es = hospital();
        let labels = generate_label_times(&es, &ProblemSpec::predefined(ProblemName::LosRegression)).unwrap();
        let by_id: BTreeMap<_, _> = labels.rows.iter().map(|r| (r.entity_id.as_str(), r.label)).collect();
        assert!((by_id["e1"] - 4.0).abs() < 1e-12);
        assert!((by_id["e2"] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn readmission_window_and_cutoffs() {
        let es = hospital();
        let labels = generate_label_times(&es, &ProblemSpec::predefined(ProblemName::Readmission)).unwrap();
        let by_id: BTreeMap<_, _> = labels.rows.iter().map(|r| (r.entity_id.as_str(), r.label)).collect();
        // p1: e1 ends day 5, e2 starts day 10 → within 30d.
        assert_eq!(by_id["e1"], 1.0);
        // e2 is p1's last encounter.
        assert_eq!(by_id["e2"], 0.0);
        // p2: e3 ends day 10, e4 starts day 20 → within.
        assert_eq!(by_id["e3"], 1.0);
        assert_eq!(by_id["e4"], 0.0);
        // Cutoff = discharge, not admission.
        let e1 = labels.rows.iter().find(|r| r.entity_id == "e1").unwrap();
        assert_eq!(e1.cutoff_time, ts(5, 0));
        // e5 has no discharge: excluded; counts add up.
        assert_eq!(labels.rows.len() + labels.excluded.len(), 5);
    }

    #[test]
    fn readmission_boundary_is_closed_and_same_day_start_excluded() {
        // Encounter ends day 1; sibling starts exactly 30 days later.
        let encounters = Entity::new(
            "encounter",
            "id",
            Some("start".into()),
            vec![
                col("id", SemanticType::Id, text(&[Some("a"), Some("b"), Some("c")])),
                col("patient", SemanticType::ForeignKey, text(&[Some("p"), Some("p"), Some("p")])),
                col(
                    "start",
                    SemanticType::Datetime,
                    times(&[Some(ts(1, 0)), Some(ts(31, 0)), Some(ts(1, 6))]),
                ),
                col(
                    "end",
                    SemanticType::Datetime,
                    times(&[Some(ts(1, 6)), Some(ts(31, 1)), Some(ts(2, 0))]),
                ),
            ],
        )
        .unwrap();
        let patients = Entity::new(
            "patient",
            "id",
            None,
            vec![col("id", SemanticType::Id, text(&[Some("p")]))],
        )
        .unwrap();
        let es = EntitySet {
            entities: [
                ("encounter".to_string(), encounters),
                ("patient".to_string(), patients),
            ]
            .into_iter()
            .collect(),
            relations: vec![RelationshipDecl {
                child_resource: "encounter".into(),
                child_variable: "patient".into(),
                parent_resource: "patient".into(),
                parent_variable: "id".into(),
            }],
            notes: vec![],
        };
        let labels = generate_label_times(&es, &ProblemSpec::predefined(ProblemName::Readmission)).unwrap();
        let by_id: BTreeMap<_, _> = labels.rows.iter().map(|r| (r.entity_id.as_str(), r.label)).collect();
        // `a` ends day 1 06:00; `c` starts day 1 06:00 — NOT strictly after,
        // so the next encounter is `b` at day 31 00:00, within the closed
        // 30-day window ending day 31 06:00.
        assert_eq!(by_id["a"], 1.0);
        // `c` ends day 2 00:00; next start day 31 00:00 is within 30d (day 32).
        assert_eq!(by_id["c"], 1.0);
        assert_eq!(by_id["b"], 0.0);
    }

    #[test]
    fn readmission_rejects_positive_offset() {
        let es = hospital();
        let mut spec = ProblemSpec::predefined(ProblemName::Readmission);
        spec.offset = Duration::hours(1);
        assert!(matches!(
            generate_label_times(&es, &spec),
            Err(ProblemError::InvalidOffset)
        ));
    }

    #[test]
    fn diagnosis_exact_code() {
        let es = hospital();
        let mut spec = ProblemSpec::predefined(ProblemName::Diagnosis);
        spec.params.diagnosis_code = Some("I10".into());
        let labels = generate_label_times(&es, &spec).unwrap();
        let by_id: BTreeMap<_, _> = labels.rows.iter().map(|r| (r.entity_id.as_str(), r.label)).collect();
        assert_eq!(by_id["e1"], 1.0);
        assert_eq!(by_id["e2"], 0.0);
        assert_eq!(by_id["e3"], 1.0);
        assert_eq!(by_id["e5"], 0.0);
    }

    #[test]
    fn diagnosis_requires_code_param() {
        let es = hospital();
        let spec = ProblemSpec::predefined(ProblemName::Diagnosis);
        assert!(matches!(
            generate_label_times(&es, &spec),
            Err(ProblemError::MissingParam { .. })
        ));
    }

    #[test]
    fn mortality_from_code_prefixes() {
        let es = hospital();
        let labels = generate_label_times(&es, &ProblemSpec::predefined(ProblemName::Mortality)).unwrap();
        let by_id: BTreeMap<_, _> = labels.rows.iter().map(|r| (r.entity_id.as_str(), r.label)).collect();
        // Only e2 carries X65, matching prefix X6.
        assert_eq!(by_id["e2"], 1.0);
        assert_eq!(by_id["e1"], 0.0);
        assert_eq!(labels.rows.iter().filter(|r| r.label == 1.0).count(), 1);
    }

    #[test]
    fn mortality_prefers_stored_flag() {
        let mut es = hospital();
        let target = es.entities.get_mut("encounter").unwrap();
        let mut columns = target.columns().to_vec();
        columns.push(col(
            "mortality",
            SemanticType::Boolean,
            ColumnValues::Boolean(vec![Some(true), Some(false), Some(false), Some(false), Some(false)]),
        ));
        *target = Entity::new("encounter", "id", Some("start".into()), columns).unwrap();
        let labels = generate_label_times(&es, &ProblemSpec::predefined(ProblemName::Mortality)).unwrap();
        let by_id: BTreeMap<_, _> = labels.rows.iter().map(|r| (r.entity_id.as_str(), r.label)).collect();
        assert_eq!(by_id["e1"], 1.0);
        assert_eq!(by_id["e2"], 0.0); // code X65 ignored in favor of the flag
    }

    #[test]
    fn noshow_reads_status() {
        let appointments = Entity::new(
            "appointment",
            "id",
            Some("created".into()),
            vec![
                col("id", SemanticType::Id, text(&[Some("a1"), Some("a2"), Some("a3")])),
                col(
                    "created",
                    SemanticType::Datetime,
                    times(&[Some(ts(1, 0)), Some(ts(2, 0)), Some(ts(3, 0))]),
                ),
                col(
                    "status",
                    SemanticType::Categorical,
                    text(&[Some("fulfilled"), Some("noshow"), None]),
                ),
            ],
        )
        .unwrap();
        let es = EntitySet {
            entities: [("appointment".to_string(), appointments)].into_iter().collect(),
            relations: vec![],
            notes: vec![],
        };
        let labels = generate_label_times(&es, &ProblemSpec::predefined(ProblemName::Noshow)).unwrap();
        assert_eq!(labels.rows.len(), 2);
        assert_eq!(labels.excluded.len(), 1);
        assert_eq!(labels.rows[0].label, 0.0);
        assert_eq!(labels.rows[1].label, 1.0);
        assert_eq!(labels.rows[0].cutoff_time, ts(1, 0));
        assert!((labels.positive_ratio().unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn labels_binary_and_deterministic() {
        let es = hospital();
        let spec = ProblemSpec::predefined(ProblemName::Readmission);
        let a = generate_label_times(&es, &spec).unwrap();
        let b = generate_label_times(&es, &spec).unwrap();
        assert_eq!(a, b);
        assert!(a.rows.iter().all(|r| r.label == 0.0 || r.label == 1.0));
    }

    #[test]
    fn csv_round_trip() {
        let es = hospital();
        let spec = ProblemSpec::predefined(ProblemName::Readmission);
        let labels = generate_label_times(&es, &spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csv");
        labels.write_csv(&path).unwrap();
        let back = LabelTimes::read_csv(&path, spec).unwrap();
        assert_eq!(back.rows, labels.rows);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("entity_id,cutoff_time,label\n"));
        assert!(text.contains("2012-03-05T00:00:00"));
    }

    #[test]
    fn duration_parsing() {
        assert_eq!(parse_duration("30d").unwrap(), Duration::days(30));
        assert_eq!(parse_duration("48h").unwrap(), Duration::hours(48));
        assert_eq!(parse_duration("0").unwrap(), Duration::zero());
        assert!(parse_duration("nope").is_err());
    }

    #[test]
    fn definition_block() {
        let es = hospital();
        let labels = generate_label_times(&es, &ProblemSpec::predefined(ProblemName::Readmission)).unwrap();
        let def = labels.definition();
        assert_eq!(def.rows, 4);
        assert_eq!(def.excluded, 1);
        assert!((def.positive_ratio_pct.unwrap() - 50.0).abs() < 1e-9);
        assert!(def.label_mean.is_none());
    }
}

//! Depth-bounded deep feature synthesis.
//!
//! For every `(entity_id, cutoff_time)` row the world is first truncated at
//! the cutoff — a row of a time-indexed entity is visible only while its
//! time index is at or before the cutoff, and rows with a null time index
//! are never visible. Features are then computed over the visible data
//! only, so mutating anything after a row's cutoff cannot change that row
//! of the matrix.
//!
//! Features come in three kinds, composed recursively up to a maximum
//! depth:
//!
//! * direct: the target's own numeric/categorical/boolean variables, and —
//!   through foreign keys — its parents' features (`patient.gender`,
//!   `patient.address.city`, `patient.COUNT(appointment)`);
//! * transform: `DAY`/`MONTH`/`YEAR`/`IS_WEEKEND` over datetime variables;
//! * aggregation: `SUM`/`STD`/`MAX`/`MIN`/`SKEW`/`MEAN` over numeric
//!   features of child rows, `COUNT` over child rows themselves, `MODE`
//!   over categorical features, stacking across two hops
//!   (`MEAN(encounter.SUM(observation.value))`).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, NaiveDateTime, Weekday};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::problems::LabelTimes;
use crate::schema::{RelationshipDecl, SemanticType};
use crate::table::{Entity, EntitySet};

#[derive(Debug, Error)]
pub enum FeaturizeError {
    #[error("unknown entity `{0}`")]
    UnknownEntity(String),
    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("feature matrix serialization: {0}")]
    Serde(String),
}

// ---------------------------------------------------------------------------
// Primitives

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggPrimitive {
    Sum,
    Std,
    Max,
    Min,
    Skew,
    Mean,
    Count,
    Mode,
}

impl AggPrimitive {
    pub const ALL: [AggPrimitive; 8] = [
        AggPrimitive::Sum,
        AggPrimitive::Std,
        AggPrimitive::Max,
        AggPrimitive::Min,
        AggPrimitive::Skew,
        AggPrimitive::Mean,
        AggPrimitive::Count,
        AggPrimitive::Mode,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AggPrimitive::Sum => "sum",
            AggPrimitive::Std => "std",
            AggPrimitive::Max => "max",
            AggPrimitive::Min => "min",
            AggPrimitive::Skew => "skew",
            AggPrimitive::Mean => "mean",
            AggPrimitive::Count => "count",
            AggPrimitive::Mode => "mode",
        }
    }

    fn canonical(&self) -> String {
        self.as_str().to_uppercase()
    }

    /// True for the primitives that consume numeric inputs.
    pub fn is_numeric(&self) -> bool {
        !matches!(self, AggPrimitive::Count | AggPrimitive::Mode)
    }
}

impl FromStr for AggPrimitive {
    type Err = FeaturizeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AggPrimitive::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| FeaturizeError::UnknownPrimitive(s.to_owned()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformPrimitive {
    Day,
    Month,
    Year,
    IsWeekend,
}

impl TransformPrimitive {
    pub const ALL: [TransformPrimitive; 4] = [
        TransformPrimitive::Day,
        TransformPrimitive::Month,
        TransformPrimitive::Year,
        TransformPrimitive::IsWeekend,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TransformPrimitive::Day => "day",
            TransformPrimitive::Month => "month",
            TransformPrimitive::Year => "year",
            TransformPrimitive::IsWeekend => "is_weekend",
        }
    }

    fn canonical(&self) -> String {
        self.as_str().to_uppercase()
    }

    pub fn output_type(&self) -> FeatureType {
        match self {
            TransformPrimitive::IsWeekend => FeatureType::Boolean,
            _ => FeatureType::Numeric,
        }
    }

    pub fn apply(&self, t: NaiveDateTime) -> FeatureValue {
        match self {
            TransformPrimitive::Day => FeatureValue::Numeric(t.day() as f64),
            TransformPrimitive::Month => FeatureValue::Numeric(t.month() as f64),
            TransformPrimitive::Year => FeatureValue::Numeric(t.year() as f64),
            TransformPrimitive::IsWeekend => FeatureValue::Boolean(matches!(
                t.weekday(),
                Weekday::Sat | Weekday::Sun
            )),
        }
    }
}

impl FromStr for TransformPrimitive {
    type Err = FeaturizeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TransformPrimitive::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| FeaturizeError::UnknownPrimitive(s.to_owned()))
    }
}

// ---------------------------------------------------------------------------
// Feature definitions

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Direct,
    Transform,
    Aggregation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureType {
    Numeric,
    Categorical,
    Boolean,
}

/// Recursive feature expression; self-contained so a saved manifest can
/// recompute matrices on fresh data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum FeatureExpr {
    /// A column of the row's own entity.
    Direct { entity: String, column: String },
    /// A calendar transform of a datetime column of the row's own entity.
    Transform {
        primitive: TransformPrimitive,
        entity: String,
        column: String,
    },
    /// Follow a foreign key to the parent row and evaluate there.
    ParentLift {
        relation: RelationshipDecl,
        inner: Box<FeatureExpr>,
    },
    /// Number of visible child rows pointing at this row.
    Count { relation: RelationshipDecl },
    /// Aggregate `inner`, evaluated per visible child row.
    Agg {
        primitive: AggPrimitive,
        relation: RelationshipDecl,
        inner: Box<FeatureExpr>,
    },
}

impl FeatureExpr {
    /// Canonical display name: bare columns for the target itself,
    /// `parent.`-prefixed lifts, `PRIMITIVE(entity.inner)` aggregations.
    pub fn name(&self) -> String {
        match self {
            FeatureExpr::Direct { column, .. } => column.clone(),
            FeatureExpr::Transform { primitive, column, .. } => {
                format!("{}({column})", primitive.canonical())
            }
            FeatureExpr::ParentLift { relation, inner } => {
                format!("{}.{}", relation.parent_resource, inner.name())
            }
            FeatureExpr::Count { relation } => format!("COUNT({})", relation.child_resource),
            FeatureExpr::Agg {
                primitive,
                relation,
                inner,
            } => format!(
                "{}({}.{})",
                primitive.canonical(),
                relation.child_resource,
                inner.name()
            ),
        }
    }

    pub fn kind(&self) -> FeatureKind {
        match self {
            FeatureExpr::Direct { .. } => FeatureKind::Direct,
            FeatureExpr::Transform { .. } => FeatureKind::Transform,
            FeatureExpr::ParentLift { inner, .. } => inner.kind(),
            FeatureExpr::Count { .. } | FeatureExpr::Agg { .. } => FeatureKind::Aggregation,
        }
    }

    pub fn primitive(&self) -> &'static str {
        match self {
            FeatureExpr::Direct { .. } => "identity",
            FeatureExpr::Transform { primitive, .. } => primitive.as_str(),
            FeatureExpr::ParentLift { inner, .. } => inner.primitive(),
            FeatureExpr::Count { .. } => "count",
            FeatureExpr::Agg { primitive, .. } => primitive.as_str(),
        }
    }

    /// Relation hops from the target entity.
    pub fn depth(&self) -> usize {
        match self {
            FeatureExpr::Direct { .. } | FeatureExpr::Transform { .. } => 0,
            FeatureExpr::ParentLift { inner, .. } => 1 + inner.depth(),
            FeatureExpr::Count { .. } => 1,
            FeatureExpr::Agg { inner, .. } => 1 + inner.depth(),
        }
    }

    /// Entities traversed, outward from the target.
    pub fn path(&self) -> Vec<String> {
        match self {
            FeatureExpr::Direct { .. } | FeatureExpr::Transform { .. } => vec![],
            FeatureExpr::ParentLift { relation, inner } => {
                let mut p = vec![relation.parent_resource.clone()];
                p.extend(inner.path());
                p
            }
            FeatureExpr::Count { relation } => vec![relation.child_resource.clone()],
            FeatureExpr::Agg { relation, inner, .. } => {
                let mut p = vec![relation.child_resource.clone()];
                p.extend(inner.path());
                p
            }
        }
    }

    pub fn output_type(&self, entityset: &EntitySet) -> FeatureType {
        match self {
            FeatureExpr::Direct { entity, column } => {
                let semantic = entityset
                    .entity(entity)
                    .and_then(|e| e.column(column))
                    .map(|c| c.decl.semantic);
                match semantic {
                    Some(SemanticType::Numeric) => FeatureType::Numeric,
                    Some(SemanticType::Boolean) => FeatureType::Boolean,
                    _ => FeatureType::Categorical,
                }
            }
            FeatureExpr::Transform { primitive, .. } => primitive.output_type(),
            FeatureExpr::ParentLift { inner, .. } => inner.output_type(entityset),
            FeatureExpr::Count { .. } => FeatureType::Numeric,
            FeatureExpr::Agg { primitive, inner, .. } => match primitive {
                AggPrimitive::Mode => inner.output_type(entityset),
                _ => FeatureType::Numeric,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDef {
    pub name: String,
    pub kind: FeatureKind,
    pub primitive: String,
    pub path: Vec<String>,
    pub depth: usize,
    pub output_type: FeatureType,
    pub expr: FeatureExpr,
}

impl FeatureDef {
    pub fn from_expr(expr: FeatureExpr, entityset: &EntitySet) -> Self {
        FeatureDef {
            name: expr.name(),
            kind: expr.kind(),
            primitive: expr.primitive().to_owned(),
            path: expr.path(),
            depth: expr.depth(),
            output_type: expr.output_type(entityset),
            expr,
        }
    }
}

/// Sidecar manifest written next to the feature matrix; enough to recompute
/// the same features on a fresh entityset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub target_entity: String,
    pub max_depth: usize,
    pub features: Vec<FeatureDef>,
}

impl FeatureManifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FeaturizeError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| FeaturizeError::Serde(e.to_string()))?;
        std::fs::write(path.as_ref(), text).map_err(|source| FeaturizeError::Io {
            path: path.as_ref().display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FeaturizeError> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|source| FeaturizeError::Io {
            path: path.as_ref().display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| FeaturizeError::Serde(e.to_string()))
    }
}

// ---------------------------------------------------------------------------
// Enumeration

/// Deterministic feature enumeration for `target_entity`, including every
/// type-compatible primitive application reachable within `max_depth`
/// relation hops. `excluded` lists `(entity, variable)` pairs that must not
/// appear anywhere in a feature (label sources).
pub fn enumerate_features(
    entityset: &EntitySet,
    target_entity: &str,
    agg_primitives: &[AggPrimitive],
    transform_primitives: &[TransformPrimitive],
    max_depth: usize,
    excluded: &[(String, String)],
) -> Result<Vec<FeatureDef>, FeaturizeError> {
    let target = entityset
        .entity(target_entity)
        .ok_or_else(|| FeaturizeError::UnknownEntity(target_entity.to_owned()))?;
    let ctx = EnumerationContext {
        entityset,
        aggs: agg_primitives,
        transforms: transform_primitives,
        excluded,
    };
    let exprs = ctx.features_for(target, max_depth, true);
    let mut seen = HashSet::new();
    let mut defs = Vec::new();
    for expr in exprs {
        let def = FeatureDef::from_expr(expr, entityset);
        // Parallel foreign keys to the same parent would alias names; first
        // declaration wins.
        if seen.insert(def.name.clone()) {
            defs.push(def);
        }
    }
    Ok(defs)
}

struct EnumerationContext<'a> {
    entityset: &'a EntitySet,
    aggs: &'a [AggPrimitive],
    transforms: &'a [TransformPrimitive],
    excluded: &'a [(String, String)],
}

impl EnumerationContext<'_> {
    fn is_excluded(&self, entity: &str, column: &str) -> bool {
        self.excluded.iter().any(|(e, c)| e == entity && c == column)
    }

    /// All features of `entity` reachable within `budget` hops. `allow_lift`
    /// gates parent traversal: inside an aggregation pool, climbing back up
    /// the graph is disallowed.
    fn features_for(&self, entity: &Entity, budget: usize, allow_lift: bool) -> Vec<FeatureExpr> {
        let mut out = Vec::new();

        for column in entity.columns() {
            if self.is_excluded(&entity.name, &column.decl.name) {
                continue;
            }
            match column.decl.semantic {
                SemanticType::Numeric | SemanticType::Categorical | SemanticType::Boolean => {
                    out.push(FeatureExpr::Direct {
                        entity: entity.name.clone(),
                        column: column.decl.name.clone(),
                    });
                }
                SemanticType::Datetime => {
                    for &primitive in self.transforms {
                        out.push(FeatureExpr::Transform {
                            primitive,
                            entity: entity.name.clone(),
                            column: column.decl.name.clone(),
                        });
                    }
                }
                SemanticType::Id | SemanticType::ForeignKey | SemanticType::Text => {}
            }
        }

        if budget == 0 {
            return out;
        }

        for relation in self.entityset.child_relations(&entity.name) {
            let Some(child) = self.entityset.entity(&relation.child_resource) else {
                continue;
            };
            if self.aggs.contains(&AggPrimitive::Count) {
                out.push(FeatureExpr::Count {
                    relation: relation.clone(),
                });
            }
            for member in self.features_for(child, budget - 1, false) {
                match member.output_type(self.entityset) {
                    FeatureType::Numeric => {
                        for &agg in self.aggs.iter().filter(|a| a.is_numeric()) {
                            out.push(FeatureExpr::Agg {
                                primitive: agg,
                                relation: relation.clone(),
                                inner: Box::new(member.clone()),
                            });
                        }
                    }
                    FeatureType::Categorical => {
                        if self.aggs.contains(&AggPrimitive::Mode) {
                            out.push(FeatureExpr::Agg {
                                primitive: AggPrimitive::Mode,
                                relation: relation.clone(),
                                inner: Box::new(member.clone()),
                            });
                        }
                    }
                    FeatureType::Boolean => {}
                }
            }
        }

        if allow_lift {
            for relation in self.entityset.parent_relations(&entity.name) {
                let Some(parent) = self.entityset.entity(&relation.parent_resource) else {
                    continue;
                };
                for inner in self.features_for(parent, budget - 1, true) {
                    out.push(FeatureExpr::ParentLift {
                        relation: relation.clone(),
                        inner: Box::new(inner),
                    });
                }
            }
        }

        out
    }
}

// ---------------------------------------------------------------------------
// Cutoff views

/// Visibility mask over an entityset at one cutoff time: rows of
/// time-indexed entities with a time index at or before the cutoff are
/// visible, rows with a null time index never are, and entities without a
/// time index are static (always visible).
pub struct CutoffView<'a> {
    entityset: &'a EntitySet,
    masks: BTreeMap<&'a str, Vec<bool>>,
}

pub fn apply_cutoff(entityset: &EntitySet, cutoff: NaiveDateTime) -> CutoffView<'_> {
    let mut masks = BTreeMap::new();
    for (name, entity) in &entityset.entities {
        let Some(time_col) = entity.time_index.as_deref().and_then(|n| entity.column(n)) else {
            continue;
        };
        let mask = (0..entity.row_count())
            .map(|row| matches!(time_col.timestamp(row), Some(t) if t <= cutoff))
            .collect();
        masks.insert(name.as_str(), mask);
    }
    CutoffView { entityset, masks }
}

impl CutoffView<'_> {
    pub fn is_visible(&self, entity: &str, row: usize) -> bool {
        self.masks.get(entity).map(|m| m[row]).unwrap_or(true)
    }

    pub fn visible_rows(&self, entity: &str) -> Vec<usize> {
        let Some(e) = self.entityset.entity(entity) else {
            return vec![];
        };
        (0..e.row_count()).filter(|&r| self.is_visible(entity, r)).collect()
    }
}

// ---------------------------------------------------------------------------
// Computation

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureValue {
    Numeric(f64),
    Categorical(String),
    Boolean(bool),
}

impl fmt::Display for FeatureValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureValue::Numeric(x) => write!(f, "{x}"),
            FeatureValue::Categorical(s) => f.write_str(s),
            FeatureValue::Boolean(b) => write!(f, "{b}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureColumn {
    Numeric(Vec<Option<f64>>),
    Categorical(Vec<Option<String>>),
    Boolean(Vec<Option<bool>>),
}

impl FeatureColumn {
    fn new(t: FeatureType) -> Self {
        match t {
            FeatureType::Numeric => FeatureColumn::Numeric(vec![]),
            FeatureType::Categorical => FeatureColumn::Categorical(vec![]),
            FeatureType::Boolean => FeatureColumn::Boolean(vec![]),
        }
    }

    fn push(&mut self, value: Option<FeatureValue>) {
        match (self, value) {
            (FeatureColumn::Numeric(v), Some(FeatureValue::Numeric(x))) => v.push(Some(x)),
            (FeatureColumn::Numeric(v), None) => v.push(None),
            (FeatureColumn::Categorical(v), Some(FeatureValue::Categorical(x))) => v.push(Some(x)),
            (FeatureColumn::Categorical(v), None) => v.push(None),
            (FeatureColumn::Boolean(v), Some(FeatureValue::Boolean(x))) => v.push(Some(x)),
            (FeatureColumn::Boolean(v), None) => v.push(None),
            (col, value) => unreachable!("feature value {value:?} does not fit column {col:?}"),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            FeatureColumn::Numeric(v) => v.len(),
            FeatureColumn::Categorical(v) => v.len(),
            FeatureColumn::Boolean(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, row: usize) -> Option<FeatureValue> {
        match self {
            FeatureColumn::Numeric(v) => v[row].map(FeatureValue::Numeric),
            FeatureColumn::Categorical(v) => v[row].clone().map(FeatureValue::Categorical),
            FeatureColumn::Boolean(v) => v[row].map(FeatureValue::Boolean),
        }
    }
}

/// Rows aligned to the label-times order; columns follow enumeration order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub features: Vec<FeatureDef>,
    pub entity_ids: Vec<String>,
    pub cutoff_times: Vec<NaiveDateTime>,
    pub columns: Vec<FeatureColumn>,
}

pub fn compute_feature_matrix(
    entityset: &EntitySet,
    label_times: &LabelTimes,
    features: &[FeatureDef],
) -> Result<FeatureMatrix, FeaturizeError> {
    let target = entityset
        .entity(&label_times.problem.target_entity)
        .ok_or_else(|| FeaturizeError::UnknownEntity(label_times.problem.target_entity.clone()))?;
    let groups = ChildGroups::build(entityset, features);

    let mut columns: Vec<FeatureColumn> = features
        .iter()
        .map(|f| FeatureColumn::new(f.output_type))
        .collect();
    let mut entity_ids = Vec::with_capacity(label_times.rows.len());
    let mut cutoff_times = Vec::with_capacity(label_times.rows.len());

    for label_row in &label_times.rows {
        let view = apply_cutoff(entityset, label_row.cutoff_time);
        let row = target.row_of(&label_row.entity_id);
        for (feature, column) in features.iter().zip(columns.iter_mut()) {
            let value = row.and_then(|row| eval(&feature.expr, entityset, &groups, &view, target, row));
            column.push(value);
        }
        entity_ids.push(label_row.entity_id.clone());
        cutoff_times.push(label_row.cutoff_time);
    }

    Ok(FeatureMatrix {
        features: features.to_vec(),
        entity_ids,
        cutoff_times,
        columns,
    })
}

/// Precomputed child-row lookup: (child entity, fk column) → parent key →
/// child row indices.
struct ChildGroups {
    groups: HashMap<(String, String), HashMap<String, Vec<usize>>>,
}

impl ChildGroups {
    fn build(entityset: &EntitySet, features: &[FeatureDef]) -> Self {
        let mut wanted: HashSet<(String, String)> = HashSet::new();
        for f in features {
            collect_agg_relations(&f.expr, &mut wanted);
        }
        let mut groups = HashMap::new();
        for (child_name, fk_name) in wanted {
            let Some(child) = entityset.entity(&child_name) else {
                continue;
            };
            let Some(fk) = child.column(&fk_name) else {
                continue;
            };
            let mut map: HashMap<String, Vec<usize>> = HashMap::new();
            for row in 0..child.row_count() {
                if let Some(key) = fk.text(row) {
                    map.entry(key.to_owned()).or_default().push(row);
                }
            }
            groups.insert((child_name, fk_name), map);
        }
        ChildGroups { groups }
    }

    fn rows<'a>(&'a self, relation: &RelationshipDecl, parent_key: &str) -> &'a [usize] {
        self.groups
            .get(&(relation.child_resource.clone(), relation.child_variable.clone()))
            .and_then(|m| m.get(parent_key))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }
}

fn collect_agg_relations(expr: &FeatureExpr, out: &mut HashSet<(String, String)>) {
    match expr {
        FeatureExpr::Count { relation } => {
            out.insert((relation.child_resource.clone(), relation.child_variable.clone()));
        }
        FeatureExpr::Agg { relation, inner, .. } => {
            out.insert((relation.child_resource.clone(), relation.child_variable.clone()));
            collect_agg_relations(inner, out);
        }
        FeatureExpr::ParentLift { inner, .. } => collect_agg_relations(inner, out),
        _ => {}
    }
}

fn eval(
    expr: &FeatureExpr,
    entityset: &EntitySet,
    groups: &ChildGroups,
    view: &CutoffView<'_>,
    entity: &Entity,
    row: usize,
) -> Option<FeatureValue> {
    if !view.is_visible(&entity.name, row) {
        return None;
    }
    match expr {
        FeatureExpr::Direct { column, .. } => {
            let col = entity.column(column)?;
            match &col.values {
                crate::table::ColumnValues::Numeric(v) => v[row].map(FeatureValue::Numeric),
                crate::table::ColumnValues::Boolean(v) => v[row].map(FeatureValue::Boolean),
                crate::table::ColumnValues::Text(v) => v[row].clone().map(FeatureValue::Categorical),
                crate::table::ColumnValues::Datetime(_) => None,
            }
        }
        FeatureExpr::Transform { primitive, column, .. } => {
            let t = entity.column(column)?.timestamp(row)?;
            Some(primitive.apply(t))
        }
        FeatureExpr::ParentLift { relation, inner } => {
            let fk = entity.column(&relation.child_variable)?.text(row)?;
            let parent = entityset.entity(&relation.parent_resource)?;
            let parent_row = parent.row_of(&fk)?;
            eval(inner, entityset, groups, view, parent, parent_row)
        }
        FeatureExpr::Count { relation } => {
            let key = entity.key_of(row);
            let child = entityset.entity(&relation.child_resource)?;
            let visible = groups
                .rows(relation, &key)
                .iter()
                .filter(|&&r| view.is_visible(&child.name, r))
                .count();
            Some(FeatureValue::Numeric(visible as f64))
        }
        FeatureExpr::Agg {
            primitive,
            relation,
            inner,
        } => {
            let key = entity.key_of(row);
            let child = entityset.entity(&relation.child_resource)?;
            let values: Vec<FeatureValue> = groups
                .rows(relation, &key)
                .iter()
                .filter(|&&r| view.is_visible(&child.name, r))
                .filter_map(|&r| eval(inner, entityset, groups, view, child, r))
                .collect();
            aggregate(*primitive, values)
        }
    }
}

fn aggregate(primitive: AggPrimitive, values: Vec<FeatureValue>) -> Option<FeatureValue> {
    match primitive {
        AggPrimitive::Mode => {
            let mut counts: BTreeMap<String, usize> = BTreeMap::new();
            for v in values {
                if let FeatureValue::Categorical(s) = v {
                    *counts.entry(s).or_insert(0) += 1;
                }
            }
            // Ties break toward the lexicographically smallest value, which
            // the BTreeMap's ordering hands us for free.
            counts
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(value, _)| FeatureValue::Categorical(value.clone()))
        }
        _ => {
            let nums: Vec<f64> = values
                .into_iter()
                .filter_map(|v| match v {
                    FeatureValue::Numeric(x) => Some(x),
                    _ => None,
                })
                .collect();
            numeric_aggregate(primitive, &nums).map(FeatureValue::Numeric)
        }
    }
}

fn numeric_aggregate(primitive: AggPrimitive, values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        // Empty groups yield null for every primitive except count, which
        // the caller handles before reaching here.
        return None;
    }
    let n = values.len() as f64;
    match primitive {
        AggPrimitive::Sum => Some(values.iter().sum()),
        AggPrimitive::Mean => Some(values.iter().sum::<f64>() / n),
        AggPrimitive::Max => values.iter().copied().reduce(f64::max),
        AggPrimitive::Min => values.iter().copied().reduce(f64::min),
        AggPrimitive::Std => crate::audit::population_std(values),
        AggPrimitive::Skew => adjusted_skewness(values),
        AggPrimitive::Count | AggPrimitive::Mode => unreachable!("handled elsewhere"),
    }
}

/// Adjusted Fisher-Pearson sample skewness:
/// `G1 = g1 * sqrt(n(n-1)) / (n-2)` with `g1 = m3 / m2^(3/2)`.
/// Undefined for groups smaller than 3 or with zero variance.
pub fn adjusted_skewness(values: &[f64]) -> Option<f64> {
    let n = values.len();
    if n < 3 {
        return None;
    }
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let m2 = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / nf;
    let m3 = values.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / nf;
    if m2 == 0.0 {
        return None;
    }
    let g1 = m3 / m2.powf(1.5);
    Some(g1 * (nf * (nf - 1.0)).sqrt() / (nf - 2.0))
}

// ---------------------------------------------------------------------------
// Matrix I/O

impl FeatureMatrix {
    pub fn row_count(&self) -> usize {
        self.entity_ids.len()
    }

    /// A copy restricted to `rows`, preserving their given order.
    pub fn subset(&self, rows: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            features: self.features.clone(),
            entity_ids: rows.iter().map(|&r| self.entity_ids[r].clone()).collect(),
            cutoff_times: rows.iter().map(|&r| self.cutoff_times[r]).collect(),
            columns: self
                .columns
                .iter()
                .map(|col| match col {
                    FeatureColumn::Numeric(v) => {
                        FeatureColumn::Numeric(rows.iter().map(|&r| v[r]).collect())
                    }
                    FeatureColumn::Categorical(v) => {
                        FeatureColumn::Categorical(rows.iter().map(|&r| v[r].clone()).collect())
                    }
                    FeatureColumn::Boolean(v) => {
                        FeatureColumn::Boolean(rows.iter().map(|&r| v[r]).collect())
                    }
                })
                .collect(),
        }
    }

    /// CSV with `entity_id,cutoff_time` followed by the canonical feature
    /// names; nulls are empty cells.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), FeaturizeError> {
        let mut writer =
            csv::Writer::from_path(path.as_ref()).map_err(|e| FeaturizeError::Serde(e.to_string()))?;
        let mut header = vec!["entity_id".to_owned(), "cutoff_time".to_owned()];
        header.extend(self.features.iter().map(|f| f.name.clone()));
        writer
            .write_record(&header)
            .map_err(|e| FeaturizeError::Serde(e.to_string()))?;
        for row in 0..self.row_count() {
            let mut record = vec![
                self.entity_ids[row].clone(),
                self.cutoff_times[row].format("%Y-%m-%dT%H:%M:%S").to_string(),
            ];
            for column in &self.columns {
                record.push(column.get(row).map(|v| v.to_string()).unwrap_or_default());
            }
            writer
                .write_record(&record)
                .map_err(|e| FeaturizeError::Serde(e.to_string()))?;
        }
        writer.flush().map_err(|e| FeaturizeError::Serde(e.to_string()))?;
        Ok(())
    }

    /// Reads a matrix back using the manifest for column typing.
    pub fn read_csv(path: impl AsRef<Path>, manifest: &FeatureManifest) -> Result<Self, FeaturizeError> {
        let mut reader =
            csv::Reader::from_path(path.as_ref()).map_err(|e| FeaturizeError::Serde(e.to_string()))?;
        let mut entity_ids = Vec::new();
        let mut cutoff_times = Vec::new();
        let mut columns: Vec<FeatureColumn> = manifest
            .features
            .iter()
            .map(|f| FeatureColumn::new(f.output_type))
            .collect();
        for record in reader.records() {
            let record = record.map_err(|e| FeaturizeError::Serde(e.to_string()))?;
            entity_ids.push(record.get(0).unwrap_or("").to_owned());
            let cutoff = record.get(1).unwrap_or("");
            cutoff_times.push(
                crate::assemble::parse_datetime(cutoff)
                    .ok_or_else(|| FeaturizeError::Serde(format!("bad cutoff `{cutoff}`")))?,
            );
            for (i, column) in columns.iter_mut().enumerate() {
                let cell = record.get(i + 2).unwrap_or("");
                let value = if cell.is_empty() {
                    None
                } else {
                    Some(match manifest.features[i].output_type {
                        FeatureType::Numeric => FeatureValue::Numeric(
                            cell.parse()
                                .map_err(|_| FeaturizeError::Serde(format!("bad number `{cell}`")))?,
                        ),
                        FeatureType::Boolean => FeatureValue::Boolean(cell == "true"),
                        FeatureType::Categorical => FeatureValue::Categorical(cell.to_owned()),
                    })
                };
                column.push(value);
            }
        }
        Ok(FeatureMatrix {
            features: manifest.features.clone(),
            entity_ids,
            cutoff_times,
            columns,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{LabelRow, ProblemName, ProblemSpec};
    use crate::schema::VariableDecl;
    use crate::table::{Column, ColumnValues};
    use chrono::NaiveDate;

    fn ts(day: u32) -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2016, 5, day)
            .unwrap()
            .and_hms_opt(12, 0, 0)
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

    fn nums(values: &[Option<f64>]) -> ColumnValues {
        ColumnValues::Numeric(values.to_vec())
    }

    fn times(values: &[Option<NaiveDateTime>]) -> ColumnValues {
        ColumnValues::Datetime(values.to_vec())
    }

    fn rel(c: &str, cv: &str, p: &str, pv: &str) -> RelationshipDecl {
        RelationshipDecl {
            child_resource: c.into(),
            child_variable: cv.into(),
            parent_resource: p.into(),
            parent_variable: pv.into(),
        }
    }

    /// patient ← visit (time-indexed, numeric amount, categorical kind).
    fn clinic() -> EntitySet {
        let patient = Entity::new(
            "patient",
            "id",
            None,
            vec![
                col("id", SemanticType::Id, text(&[Some("p1"), Some("p2")])),
                col("age", SemanticType::Numeric, nums(&[Some(40.0), Some(60.0)])),
            ],
        )
        .unwrap();
        let visit = Entity::new(
            "visit",
            "id",
            Some("when".into()),
            vec![
                col(
                    "id",
                    SemanticType::Id,
                    text(&[Some("v1"), Some("v2"), Some("v3"), Some("v4"), Some("v5")]),
                ),
                col(
                    "patient",
                    SemanticType::ForeignKey,
                    text(&[Some("p1"), Some("p1"), Some("p1"), Some("p2"), Some("p1")]),
                ),
                col(
                    "when",
                    SemanticType::Datetime,
                    times(&[Some(ts(1)), Some(ts(5)), Some(ts(9)), Some(ts(2)), None]),
                ),
                col(
                    "amount",
                    SemanticType::Numeric,
                    nums(&[Some(2.0), Some(3.0), Some(7.0), Some(1.0), Some(100.0)]),
                ),
                col(
                    "kind",
                    SemanticType::Categorical,
                    text(&[Some("b"), Some("a"), Some("a"), Some("c"), Some("z")]),
                ),
            ],
        )
        .unwrap();
        EntitySet {
            entities: [
                ("patient".to_string(), patient),
                ("visit".to_string(), visit),
            ]
            .into_iter()
            .collect(),
            relations: vec![rel("visit", "patient", "patient", "id")],
            notes: vec![],
        }
    }

    fn label_times_for(target: &str, rows: &[(&str, NaiveDateTime)]) -> LabelTimes {
        let mut spec = ProblemSpec::predefined(ProblemName::Noshow);
        spec.target_entity = target.into();
        LabelTimes {
            problem: spec,
            rows: rows
                .iter()
                .map(|(id, t)| LabelRow {
                    entity_id: (*id).to_owned(),
                    cutoff_time: *t,
                    label: 0.0,
                })
                .collect(),
            excluded: vec![],
        }
    }

    #[test]
    fn cutoff_examples() {
        let es = clinic();
        let view = apply_cutoff(&es, ts(5));
        // days {1,5,9}, cutoff day 5 → {1,5}; the null-time row never shows.
        assert_eq!(view.visible_rows("visit"), vec![0, 1, 3]);
        let before_all = apply_cutoff(&es, ts(1) - chrono::Duration::days(30));
        assert!(before_all.visible_rows("visit").is_empty());
        // Static entities are always fully visible.
        assert_eq!(view.visible_rows("patient"), vec![0, 1]);
    }

    #[test]
    fn toy_depth1_counts_exactly_eight() {
        // Target with 1 numeric variable, one child with 1 numeric variable:
        // 1 direct + COUNT + 6 numeric aggregations. Mode has no categorical
        // input, so it contributes nothing.
        let parent = Entity::new(
            "parent",
            "id",
            None,
            vec![
                col("id", SemanticType::Id, text(&[Some("x")])),
                col("v", SemanticType::Numeric, nums(&[Some(1.0)])),
            ],
        )
        .unwrap();
        let child = Entity::new(
            "child",
            "id",
            None,
            vec![
                col("id", SemanticType::Id, text(&[Some("c")])),
                col("parent", SemanticType::ForeignKey, text(&[Some("x")])),
                col("w", SemanticType::Numeric, nums(&[Some(2.0)])),
            ],
        )
        .unwrap();
        let es = EntitySet {
            entities: [
                ("parent".to_string(), parent),
                ("child".to_string(), child),
            ]
            .into_iter()
            .collect(),
            relations: vec![rel("child", "parent", "parent", "id")],
            notes: vec![],
        };
        let defs = enumerate_features(
            &es,
            "parent",
            &AggPrimitive::ALL,
            &TransformPrimitive::ALL,
            1,
            &[],
        )
        .unwrap();
        assert_eq!(defs.len(), 8, "{:?}", defs.iter().map(|d| &d.name).collect::<Vec<_>>());
        assert_eq!(defs.iter().filter(|d| d.kind == FeatureKind::Direct).count(), 1);
        assert_eq!(defs.iter().filter(|d| d.kind == FeatureKind::Aggregation).count(), 7);
    }

    #[test]
    fn depth0_only_directs() {
        let es = clinic();
        let defs = enumerate_features(
            &es,
            "patient",
            &AggPrimitive::ALL,
            &TransformPrimitive::ALL,
            0,
            &[],
        )
        .unwrap();
        assert_eq!(defs.len(), 1);
        assert_eq!(defs[0].name, "age");
        assert_eq!(defs[0].depth, 0);
    }

    #[test]
    fn enumeration_monotone_in_depth() {
        let es = clinic();
        let names = |depth| {
            enumerate_features(&es, "patient", &AggPrimitive::ALL, &TransformPrimitive::ALL, depth, &[])
                .unwrap()
                .into_iter()
                .map(|d| d.name)
                .collect::<std::collections::BTreeSet<_>>()
        };
        let d0 = names(0);
        let d1 = names(1);
        let d2 = names(2);
        assert!(d0.is_subset(&d1));
        assert!(d1.is_subset(&d2));
        assert!(d1.len() > d0.len());
    }

    #[test]
    fn aggregation_values_with_cutoff() {
        let es = clinic();
        let defs = enumerate_features(&es, "patient", &AggPrimitive::ALL, &TransformPrimitive::ALL, 1, &[])
            .unwrap();
        let labels = label_times_for("patient", &[("p1", ts(5)), ("p2", ts(1))]);
        let matrix = compute_feature_matrix(&es, &labels, &defs).unwrap();
        let col_by_name = |name: &str| {
            let idx = matrix.features.iter().position(|f| f.name == name).unwrap();
            &matrix.columns[idx]
        };
        // p1 at day 5 sees visits v1 (2.0) and v2 (3.0): SUM 5, COUNT 2.
        match col_by_name("SUM(visit.amount)") {
            FeatureColumn::Numeric(v) => assert_eq!(v[0], Some(5.0)),
            _ => panic!(),
        }
        match col_by_name("COUNT(visit)") {
            FeatureColumn::Numeric(v) => {
                assert_eq!(v[0], Some(2.0));
                // p2 at day 1: its only visit is day 2 → empty group.
                assert_eq!(v[1], Some(0.0));
            }
            _ => panic!(),
        }
        // Empty group → null for MEAN.
        match col_by_name("MEAN(visit.amount)") {
            FeatureColumn::Numeric(v) => {
                assert_eq!(v[0], Some(2.5));
                assert_eq!(v[1], None);
            }
            _ => panic!(),
        }
        // MODE over {b, a} at day 5: tie → lexicographically smallest.
        match col_by_name("MODE(visit.kind)") {
            FeatureColumn::Categorical(v) => assert_eq!(v[0].as_deref(), Some("a")),
            _ => panic!(),
        }
    }

    #[test]
    fn std_is_population() {
        assert_eq!(numeric_aggregate(AggPrimitive::Std, &[2.0, 4.0]), Some(1.0));
        assert_eq!(numeric_aggregate(AggPrimitive::Std, &[5.0]), Some(0.0));
    }

    #[test]
    fn skew_oracle() {
        // Independent evaluation of the adjusted Fisher-Pearson formula for
        // {1,2,3,4,10}: mean 4, m2 10, m3 36.
        let g1 = 36.0 / 10.0f64.powf(1.5);
        let expected = g1 * (5.0f64 * 4.0).sqrt() / 3.0;
        let got = adjusted_skewness(&[1.0, 2.0, 3.0, 4.0, 10.0]).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 1.6970) < 1e-3);
        // Degenerate groups.
        assert_eq!(adjusted_skewness(&[1.0, 2.0]), None);
        assert_eq!(adjusted_skewness(&[3.0, 3.0, 3.0]), None);
    }

    #[test]
    fn leakage_mutating_future_rows_is_invisible() {
        let es = clinic();
        let defs = enumerate_features(&es, "patient", &AggPrimitive::ALL, &TransformPrimitive::ALL, 1, &[])
            .unwrap();
        let labels = label_times_for("patient", &[("p1", ts(5))]);
        let baseline = compute_feature_matrix(&es, &labels, &defs).unwrap();

        // Mutate v3 (day 9 — after the cutoff) to an absurd value.
        let mut mutated = es;
        let visit = mutated.entities.get_mut("visit").unwrap();
        let mut columns = visit.columns().to_vec();
        for c in &mut columns {
            if c.decl.name == "amount" {
                if let ColumnValues::Numeric(v) = &mut c.values {
                    v[2] = Some(1_000_000.0);
                }
            }
        }
        *visit = Entity::new("visit", "id", Some("when".into()), columns).unwrap();
        let after = compute_feature_matrix(&mutated, &labels, &defs).unwrap();
        assert_eq!(baseline.columns, after.columns);
    }

    #[test]
    fn count_matches_brute_force_join() {
        let es = clinic();
        let defs = enumerate_features(&es, "patient", &[AggPrimitive::Count], &[], 1, &[]).unwrap();
        assert_eq!(defs.len(), 2); // age direct + COUNT(visit)
        for cutoff_day in [1, 2, 5, 9, 30] {
            let labels = label_times_for("patient", &[("p1", ts(cutoff_day)), ("p2", ts(cutoff_day))]);
            let matrix = compute_feature_matrix(&es, &labels, &defs).unwrap();
            let idx = matrix.features.iter().position(|f| f.name == "COUNT(visit)").unwrap();
            // Brute force: scan every visit row, joining on the fk by hand.
            let visit = es.entity("visit").unwrap();
            let fk = visit.column("patient").unwrap();
            let when = visit.column("when").unwrap();
            for (row, pid) in ["p1", "p2"].iter().enumerate() {
                let expected = (0..visit.row_count())
                    .filter(|&r| fk.text(r).as_deref() == Some(pid))
                    .filter(|&r| matches!(when.timestamp(r), Some(t) if t <= ts(cutoff_day)))
                    .count() as f64;
                match &matrix.columns[idx] {
                    FeatureColumn::Numeric(v) => assert_eq!(v[row], Some(expected)),
                    _ => panic!(),
                }
            }
        }
    }

    #[test]
    fn parent_lift_and_stacking() {
        // appointment → patient ← appointment: patient.COUNT(appointment)
        // counts all of the patient's visible appointments, including the
        // target row itself.
        let patient = Entity::new(
            "patient",
            "id",
            None,
            vec![col("id", SemanticType::Id, text(&[Some("p1")]))],
        )
        .unwrap();
        let appointment = Entity::new(
            "appointment",
            "id",
            Some("created".into()),
            vec![
                col("id", SemanticType::Id, text(&[Some("a1"), Some("a2"), Some("a3")])),
                col("patient", SemanticType::ForeignKey, text(&[Some("p1"), Some("p1"), Some("p1")])),
                col(
                    "created",
                    SemanticType::Datetime,
                    times(&[Some(ts(1)), Some(ts(3)), Some(ts(20))]),
                ),
            ],
        )
        .unwrap();
        let es = EntitySet {
            entities: [
                ("patient".to_string(), patient),
                ("appointment".to_string(), appointment),
            ]
            .into_iter()
            .collect(),
            relations: vec![rel("appointment", "patient", "patient", "id")],
            notes: vec![],
        };
        let defs = enumerate_features(&es, "appointment", &AggPrimitive::ALL, &TransformPrimitive::ALL, 2, &[])
            .unwrap();
        let lifted = defs.iter().find(|d| d.name == "patient.COUNT(appointment)").unwrap();
        assert_eq!(lifted.depth, 2);
        assert_eq!(lifted.kind, FeatureKind::Aggregation);
        // Aggregations over the child's transforms exist too.
        assert!(defs.iter().any(|d| d.name == "patient.MEAN(appointment.DAY(created))"));

        let labels = label_times_for("appointment", &[("a2", ts(3))]);
        let matrix = compute_feature_matrix(&es, &labels, &defs).unwrap();
        let idx = matrix.features.iter().position(|f| f.name == "patient.COUNT(appointment)").unwrap();
        match &matrix.columns[idx] {
            // a1 and a2 visible at day 3; a3 (day 20) is not.
            FeatureColumn::Numeric(v) => assert_eq!(v[0], Some(2.0)),
            _ => panic!(),
        }
    }

    #[test]
    fn excluded_variables_never_appear() {
        let es = clinic();
        let excluded = vec![("visit".to_string(), "amount".to_string())];
        let defs = enumerate_features(&es, "patient", &AggPrimitive::ALL, &TransformPrimitive::ALL, 2, &excluded)
            .unwrap();
        assert!(defs.iter().all(|d| !d.name.contains("amount")));
    }

    #[test]
    fn matrix_csv_round_trip() {
        let es = clinic();
        let defs = enumerate_features(&es, "patient", &AggPrimitive::ALL, &TransformPrimitive::ALL, 1, &[])
            .unwrap();
        let labels = label_times_for("patient", &[("p1", ts(5)), ("p2", ts(1))]);
        let matrix = compute_feature_matrix(&es, &labels, &defs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("features.csv");
        let manifest_path = dir.path().join("features.json");
        matrix.write_csv(&csv_path).unwrap();
        let manifest = FeatureManifest {
            target_entity: "patient".into(),
            max_depth: 1,
            features: defs.clone(),
        };
        manifest.save(&manifest_path).unwrap();

        let manifest_back = FeatureManifest::load(&manifest_path).unwrap();
        assert_eq!(manifest_back, manifest);
        let back = FeatureMatrix::read_csv(&csv_path, &manifest_back).unwrap();
        assert_eq!(back.columns, matrix.columns);
        assert_eq!(back.entity_ids, matrix.entity_ids);
    }

    #[test]
    fn deterministic_across_runs() {
        let es = clinic();
        let defs = enumerate_features(&es, "patient", &AggPrimitive::ALL, &TransformPrimitive::ALL, 2, &[])
            .unwrap();
        let labels = label_times_for("patient", &[("p1", ts(9)), ("p2", ts(9))]);
        let a = compute_feature_matrix(&es, &labels, &defs).unwrap();
        let b = compute_feature_matrix(&es, &labels, &defs).unwrap();
        assert_eq!(a, b);
        let names: Vec<_> = defs.iter().map(|d| d.name.clone()).collect();
        let mut unique = names.clone();
        unique.sort();
        unique.dedup();
        assert_eq!(unique.len(), names.len(), "feature names must be unique");
    }
}

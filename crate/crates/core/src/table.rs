//! In-memory columnar tables: typed columns with explicit nulls, entities
//! keyed by a primary-key index, and the entityset that ties them to the
//! active relation graph.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{RelationshipDecl, SemanticType, VariableDecl};

/// A single typed cell value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Number(f64),
    Text(String),
    Timestamp(NaiveDateTime),
    Bool(bool),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Number(n) => write!(f, "{n}"),
            Value::Text(s) => write!(f, "{s}"),
            Value::Timestamp(t) => write!(f, "{}", t.format("%Y-%m-%dT%H:%M:%S")),
            Value::Bool(b) => write!(f, "{b}"),
        }
    }
}

/// Column storage, one vector per semantic family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ColumnValues {
    Numeric(Vec<Option<f64>>),
    Text(Vec<Option<String>>),
    Datetime(Vec<Option<NaiveDateTime>>),
    Boolean(Vec<Option<bool>>),
}

impl ColumnValues {
    pub fn new_for(semantic: SemanticType) -> Self {
        match semantic {
            SemanticType::Numeric => Self::Numeric(Vec::new()),
            SemanticType::Datetime => Self::Datetime(Vec::new()),
            SemanticType::Boolean => Self::Boolean(Vec::new()),
            SemanticType::Id | SemanticType::ForeignKey | SemanticType::Categorical | SemanticType::Text => {
                Self::Text(Vec::new())
            }
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Numeric(v) => v.len(),
            Self::Text(v) => v.len(),
            Self::Datetime(v) => v.len(),
            Self::Boolean(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_null(&self, row: usize) -> bool {
        match self {
            Self::Numeric(v) => v[row].is_none(),
            Self::Text(v) => v[row].is_none(),
            Self::Datetime(v) => v[row].is_none(),
            Self::Boolean(v) => v[row].is_none(),
        }
    }

    pub fn value(&self, row: usize) -> Option<Value> {
        match self {
            Self::Numeric(v) => v[row].map(Value::Number),
            Self::Text(v) => v[row].clone().map(Value::Text),
            Self::Datetime(v) => v[row].map(Value::Timestamp),
            Self::Boolean(v) => v[row].map(Value::Bool),
        }
    }

    pub fn push_null(&mut self) {
        match self {
            Self::Numeric(v) => v.push(None),
            Self::Text(v) => v.push(None),
            Self::Datetime(v) => v.push(None),
            Self::Boolean(v) => v.push(None),
        }
    }
}

/// One loaded variable of an entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub decl: VariableDecl,
    pub values: ColumnValues,
}

impl Column {
    pub fn name(&self) -> &str {
        &self.decl.name
    }

    pub fn text(&self, row: usize) -> Option<&str> {
        match &self.values {
            ColumnValues::Text(v) => v[row].as_deref(),
            _ => None,
        }
    }

    pub fn number(&self, row: usize) -> Option<f64> {
        match &self.values {
            ColumnValues::Numeric(v) => v[row],
            _ => None,
        }
    }

    pub fn timestamp(&self, row: usize) -> Option<NaiveDateTime> {
        match &self.values {
            ColumnValues::Datetime(v) => v[row],
            _ => None,
        }
    }

    pub fn boolean(&self, row: usize) -> Option<bool> {
        match &self.values {
            ColumnValues::Boolean(v) => v[row],
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum TableError {
    #[error("entity `{entity}`: column `{column}` has {found} rows, expected {expected}")]
    RaggedColumn {
        entity: String,
        column: String,
        found: usize,
        expected: usize,
    },
    #[error("entity `{entity}`: missing primary key column `{column}`")]
    MissingPrimaryKey { entity: String, column: String },
    #[error("entity `{entity}`: primary key `{key}` is null or duplicated at row {row}")]
    DuplicatePrimaryKey {
        entity: String,
        key: String,
        row: usize,
    },
}

/// A loaded resource: named typed columns plus the primary-key index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub name: String,
    pub index: String,
    pub time_index: Option<String>,
    columns: Vec<Column>,
    row_count: usize,
    #[serde(skip)]
    pk_lookup: HashMap<String, usize>,
}

impl Entity {
    /// Builds an entity, checking column lengths and primary-key integrity.
    pub fn new(
        name: impl Into<String>,
        index: impl Into<String>,
        time_index: Option<String>,
        columns: Vec<Column>,
    ) -> Result<Self, TableError> {
        let name = name.into();
        let index = index.into();
        let row_count = columns.first().map(|c| c.values.len()).unwrap_or(0);
        for col in &columns {
            if col.values.len() != row_count {
                return Err(TableError::RaggedColumn {
                    entity: name,
                    column: col.decl.name.clone(),
                    found: col.values.len(),
                    expected: row_count,
                });
            }
        }
        let mut entity = Entity {
            name,
            index,
            time_index,
            columns,
            row_count,
            pk_lookup: HashMap::new(),
        };
        entity.rebuild_pk_lookup()?;
        Ok(entity)
    }

    fn rebuild_pk_lookup(&mut self) -> Result<(), TableError> {
        let pk = self
            .columns
            .iter()
            .find(|c| c.decl.name == self.index)
            .ok_or_else(|| TableError::MissingPrimaryKey {
                entity: self.name.clone(),
                column: self.index.clone(),
            })?;
        let mut lookup = HashMap::with_capacity(self.row_count);
        for row in 0..self.row_count {
            let key = match pk.values.value(row) {
                Some(v) => v.to_string(),
                None => {
                    return Err(TableError::DuplicatePrimaryKey {
                        entity: self.name.clone(),
                        key: "<null>".into(),
                        row,
                    })
                }
            };
            if lookup.insert(key.clone(), row).is_some() {
                return Err(TableError::DuplicatePrimaryKey {
                    entity: self.name.clone(),
                    key,
                    row,
                });
            }
        }
        self.pk_lookup = lookup;
        Ok(())
    }

    pub fn row_count(&self) -> usize {
        self.row_count
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.decl.name == name)
    }

    /// Row index holding the given primary-key value.
    pub fn row_of(&self, key: &str) -> Option<usize> {
        self.pk_lookup.get(key).copied()
    }

    /// Primary-key value of a row, rendered as text.
    pub fn key_of(&self, row: usize) -> String {
        self.column(&self.index)
            .and_then(|c| c.values.value(row))
            .map(|v| v.to_string())
            .unwrap_or_default()
    }

    /// Time-index timestamp of a row, when the entity has one.
    pub fn time_of(&self, row: usize) -> Option<NaiveDateTime> {
        let ti = self.time_index.as_deref()?;
        self.column(ti).and_then(|c| c.timestamp(row))
    }
}

// The pk lookup is skipped during (de)serialization, so rebuild on load.
impl Entity {
    pub fn after_deserialize(mut self) -> Result<Self, TableError> {
        self.rebuild_pk_lookup()?;
        Ok(self)
    }
}

/// What the assembler did while organizing the data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoteKind {
    MissingVariable,
    MissingResource,
    BrokenLink,
    Consolidated,
}

impl fmt::Display for NoteKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NoteKind::MissingVariable => "missing_variable",
            NoteKind::MissingResource => "missing_resource",
            NoteKind::BrokenLink => "broken_link",
            NoteKind::Consolidated => "consolidated",
        };
        f.write_str(s)
    }
}

/// One provenance record from assembly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssemblyNote {
    pub kind: NoteKind,
    pub subject: String,
    pub detail: String,
}

impl AssemblyNote {
    pub fn new(kind: NoteKind, subject: impl Into<String>, detail: impl Into<String>) -> Self {
        Self {
            kind,
            subject: subject.into(),
            detail: detail.into(),
        }
    }
}

/// The assembled world: loaded entities plus the active (acyclic) relations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntitySet {
    pub entities: BTreeMap<String, Entity>,
    pub relations: Vec<RelationshipDecl>,
    pub notes: Vec<AssemblyNote>,
}

impl EntitySet {
    pub fn entity(&self, name: &str) -> Option<&Entity> {
        self.entities.get(name)
    }

    /// Active relations in which `entity` is the parent.
    pub fn child_relations(&self, entity: &str) -> Vec<&RelationshipDecl> {
        self.relations
            .iter()
            .filter(|r| r.parent_resource == entity)
            .collect()
    }

    /// Active relations in which `entity` is the child.
    pub fn parent_relations(&self, entity: &str) -> Vec<&RelationshipDecl> {
        self.relations
            .iter()
            .filter(|r| r.child_resource == entity)
            .collect()
    }

    /// Total number of loaded columns across all entities.
    pub fn loaded_variable_count(&self) -> usize {
        self.entities.values().map(|e| e.columns().len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::SemanticType;

    fn id_column(name: &str, keys: &[&str]) -> Column {
        Column {
            decl: VariableDecl {
                name: name.into(),
                semantic: SemanticType::Id,
                nullable: false,
            },
            values: ColumnValues::Text(keys.iter().map(|k| Some((*k).to_owned())).collect()),
        }
    }

    #[test]
    fn entity_builds_pk_lookup() {
        let e = Entity::new("p", "id", None, vec![id_column("id", &["a", "b"])]).unwrap();
        assert_eq!(e.row_count(), 2);
        assert_eq!(e.row_of("b"), Some(1));
        assert_eq!(e.key_of(0), "a");
    }

    #[test]
    fn duplicate_primary_key_rejected() {
        let err = Entity::new("p", "id", None, vec![id_column("id", &["a", "a"])]).unwrap_err();
        assert!(matches!(err, TableError::DuplicatePrimaryKey { .. }));
    }

    #[test]
    fn ragged_columns_rejected() {
        let cols = vec![
            id_column("id", &["a", "b"]),
            Column {
                decl: VariableDecl {
                    name: "x".into(),
                    semantic: SemanticType::Numeric,
                    nullable: true,
                },
                values: ColumnValues::Numeric(vec![Some(1.0)]),
            },
        ];
        assert!(matches!(
            Entity::new("p", "id", None, cols),
            Err(TableError::RaggedColumn { .. })
        ));
    }
}

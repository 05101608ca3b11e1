//! Declarative schema registry: resources, typed variables, and foreign-key
//! relations over a FHIR-like subset.
//!
//! A schema file is a YAML document with two top-level keys:
//!
//! ```yaml
//! resources:
//!   patient:
//!     primary_key: id
//!     variables:
//!       id: id
//!       gender: categorical
//!   encounter:
//!     primary_key: id
//!     time_index: start
//!     variables:
//!       id: id
//!       patient: foreign_key
//!       start: datetime
//! relations:
//!   - encounter.patient -> patient.id
//! ```
//!
//! Variable types come from a fixed seven-type vocabulary. A trailing `!`
//! marks a variable non-nullable, a trailing `?` nullable; without a marker,
//! `id` variables are non-nullable and everything else is nullable.
//! Relations are declared child-to-parent (many-to-one) only.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Semantic type of a declared variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticType {
    Id,
    ForeignKey,
    Numeric,
    Categorical,
    Datetime,
    Boolean,
    Text,
}

impl SemanticType {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "id" => Self::Id,
            "foreign_key" => Self::ForeignKey,
            "numeric" => Self::Numeric,
            "categorical" => Self::Categorical,
            "datetime" => Self::Datetime,
            "boolean" => Self::Boolean,
            "text" => Self::Text,
            _ => return None,
        })
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Id => "id",
            Self::ForeignKey => "foreign_key",
            Self::Numeric => "numeric",
            Self::Categorical => "categorical",
            Self::Datetime => "datetime",
            Self::Boolean => "boolean",
            Self::Text => "text",
        }
    }
}

impl fmt::Display for SemanticType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One declared variable of a resource.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableDecl {
    pub name: String,
    pub semantic: SemanticType,
    pub nullable: bool,
}

/// A declared resource (table): ordered variables plus its primary key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceSchema {
    pub name: String,
    pub variables: Vec<VariableDecl>,
    pub primary_key: String,
    /// Datetime variable that orders this resource's rows in time, when any.
    /// Resources without a time index are treated as static by the featurizer.
    pub time_index: Option<String>,
}

impl ResourceSchema {
    pub fn variable(&self, name: &str) -> Option<&VariableDecl> {
        self.variables.iter().find(|v| v.name == name)
    }
}

/// A child-to-parent foreign-key relation: `child.child_variable` references
/// `parent.parent_variable`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelationshipDecl {
    pub child_resource: String,
    pub child_variable: String,
    pub parent_resource: String,
    pub parent_variable: String,
}

impl fmt::Display for RelationshipDecl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}.{} -> {}.{}",
            self.child_resource, self.child_variable, self.parent_resource, self.parent_variable
        )
    }
}

/// The validated schema: all resources and all legal relations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaRegistry {
    pub resources: BTreeMap<String, ResourceSchema>,
    pub relations: Vec<RelationshipDecl>,
}

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("failed to read schema file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed schema file: {0}")]
    Parse(String),
    #[error("relation `{relation}` references undeclared {kind} `{name}`")]
    DanglingReference {
        relation: String,
        kind: &'static str,
        name: String,
    },
    #[error("resource `{0}` must declare exactly one primary key variable")]
    DuplicatePrimaryKey(String),
    #[error("unknown resource `{0}`")]
    UnknownResource(String),
}

/// Loads and validates a schema file.
pub fn load_schema(path: impl AsRef<Path>) -> Result<SchemaRegistry, SchemaError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| SchemaError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_schema(&text)
}

/// Parses a schema document from its textual form.
pub fn parse_schema(text: &str) -> Result<SchemaRegistry, SchemaError> {
    let doc: serde_yaml::Value =
        serde_yaml::from_str(text).map_err(|e| SchemaError::Parse(e.to_string()))?;
    let root = doc
        .as_mapping()
        .ok_or_else(|| SchemaError::Parse("document root must be a mapping".into()))?;

    let mut resources = BTreeMap::new();
    let resources_value = root
        .get("resources")
        .ok_or_else(|| SchemaError::Parse("missing top-level `resources:`".into()))?;
    let resources_map = resources_value
        .as_mapping()
        .ok_or_else(|| SchemaError::Parse("`resources:` must be a mapping".into()))?;
    for (name, body) in resources_map {
        let name = str_key(name, "resource name")?;
        let resource = parse_resource(&name, body)?;
        if resources.insert(name.clone(), resource).is_some() {
            return Err(SchemaError::Parse(format!("resource `{name}` declared twice")));
        }
    }

    let mut relations = Vec::new();
    if let Some(rel_value) = root.get("relations") {
        let rel_seq = rel_value
            .as_sequence()
            .ok_or_else(|| SchemaError::Parse("`relations:` must be a list".into()))?;
        for item in rel_seq {
            let text = item
                .as_str()
                .ok_or_else(|| SchemaError::Parse("relation entries must be strings".into()))?;
            relations.push(parse_relation(text)?);
        }
    }

    let registry = SchemaRegistry { resources, relations };
    registry.validate()?;
    Ok(registry)
}

fn str_key(value: &serde_yaml::Value, what: &str) -> Result<String, SchemaError> {
    value
        .as_str()
        .map(str::to_owned)
        .ok_or_else(|| SchemaError::Parse(format!("{what} must be a string")))
}

fn parse_resource(name: &str, body: &serde_yaml::Value) -> Result<ResourceSchema, SchemaError> {
    let map = body
        .as_mapping()
        .ok_or_else(|| SchemaError::Parse(format!("resource `{name}` must be a mapping")))?;
    let primary_key = map
        .get("primary_key")
        .and_then(|v| v.as_str())
        .ok_or_else(|| SchemaError::Parse(format!("resource `{name}` missing `primary_key:`")))?
        .to_owned();
    let time_index = match map.get("time_index") {
        None => None,
        Some(v) => Some(
            v.as_str()
                .ok_or_else(|| {
                    SchemaError::Parse(format!("resource `{name}`: `time_index:` must be a string"))
                })?
                .to_owned(),
        ),
    };

    let vars_value = map
        .get("variables")
        .ok_or_else(|| SchemaError::Parse(format!("resource `{name}` missing `variables:`")))?;
    let vars_map = vars_value
        .as_mapping()
        .ok_or_else(|| SchemaError::Parse(format!("resource `{name}`: `variables:` must be a mapping")))?;

    let mut variables = Vec::new();
    for (var_name, type_value) in vars_map {
        let var_name = str_key(var_name, "variable name")?;
        if variables.iter().any(|v: &VariableDecl| v.name == var_name) {
            return Err(SchemaError::Parse(format!(
                "resource `{name}`: variable `{var_name}` declared twice"
            )));
        }
        let type_text = type_value.as_str().ok_or_else(|| {
            SchemaError::Parse(format!("resource `{name}`: type of `{var_name}` must be a string"))
        })?;
        variables.push(parse_variable(name, &var_name, type_text)?);
    }

    let pk_count = variables
        .iter()
        .filter(|v| v.name == primary_key)
        .count();
    if pk_count != 1 {
        return Err(SchemaError::Parse(format!(
            "resource `{name}`: primary key `{primary_key}` not declared among variables"
        )));
    }

    if let Some(ti) = &time_index {
        match variables.iter().find(|v| v.name == *ti) {
            Some(v) if v.semantic == SemanticType::Datetime => {}
            Some(v) => {
                return Err(SchemaError::Parse(format!(
                    "resource `{name}`: time index `{ti}` must be a datetime variable, found {}",
                    v.semantic
                )))
            }
            None => {
                return Err(SchemaError::Parse(format!(
                    "resource `{name}`: time index `{ti}` not declared among variables"
                )))
            }
        }
    }

    Ok(ResourceSchema {
        name: name.to_owned(),
        variables,
        primary_key,
        time_index,
    })
}

fn parse_variable(resource: &str, name: &str, type_text: &str) -> Result<VariableDecl, SchemaError> {
    let (base, nullable_override) = match type_text.strip_suffix('!') {
        Some(base) => (base, Some(false)),
        None => match type_text.strip_suffix('?') {
            Some(base) => (base, Some(true)),
            None => (type_text, None),
        },
    };
    let semantic = SemanticType::parse(base.trim()).ok_or_else(|| {
        SchemaError::Parse(format!(
            "resource `{resource}`: variable `{name}` has unknown type `{type_text}`"
        ))
    })?;
    let nullable = nullable_override.unwrap_or(semantic != SemanticType::Id);
    Ok(VariableDecl {
        name: name.to_owned(),
        semantic,
        nullable,
    })
}

fn parse_relation(text: &str) -> Result<RelationshipDecl, SchemaError> {
    let err = || SchemaError::Parse(format!("relation `{text}` must look like `child.var -> parent.var`"));
    let (child, parent) = text.split_once("->").ok_or_else(err)?;
    let (child_resource, child_variable) = child.trim().split_once('.').ok_or_else(err)?;
    let (parent_resource, parent_variable) = parent.trim().split_once('.').ok_or_else(err)?;
    if [child_resource, child_variable, parent_resource, parent_variable]
        .iter()
        .any(|s| s.trim().is_empty())
    {
        return Err(err());
    }
    Ok(RelationshipDecl {
        child_resource: child_resource.trim().to_owned(),
        child_variable: child_variable.trim().to_owned(),
        parent_resource: parent_resource.trim().to_owned(),
        parent_variable: parent_variable.trim().to_owned(),
    })
}

impl SchemaRegistry {
    /// Cross-checks every relation against the declared resources.
    pub fn validate(&self) -> Result<(), SchemaError> {
        for rel in &self.relations {
            let relation = rel.to_string();
            let child = self.resources.get(&rel.child_resource).ok_or_else(|| {
                SchemaError::DanglingReference {
                    relation: relation.clone(),
                    kind: "resource",
                    name: rel.child_resource.clone(),
                }
            })?;
            let parent = self.resources.get(&rel.parent_resource).ok_or_else(|| {
                SchemaError::DanglingReference {
                    relation: relation.clone(),
                    kind: "resource",
                    name: rel.parent_resource.clone(),
                }
            })?;
            let child_var = child.variable(&rel.child_variable).ok_or_else(|| {
                SchemaError::DanglingReference {
                    relation: relation.clone(),
                    kind: "variable",
                    name: format!("{}.{}", rel.child_resource, rel.child_variable),
                }
            })?;
            if child_var.semantic != SemanticType::ForeignKey {
                return Err(SchemaError::Parse(format!(
                    "relation `{relation}`: child variable must have type foreign_key, found {}",
                    child_var.semantic
                )));
            }
            if parent.variable(&rel.parent_variable).is_none() {
                return Err(SchemaError::DanglingReference {
                    relation: relation.clone(),
                    kind: "variable",
                    name: format!("{}.{}", rel.parent_resource, rel.parent_variable),
                });
            }
            if parent.primary_key != rel.parent_variable {
                return Err(SchemaError::Parse(format!(
                    "relation `{relation}`: parent variable must be the primary key of `{}`",
                    rel.parent_resource
                )));
            }
        }
        Ok(())
    }

    /// All declared relations in which `resource` is the child.
    pub fn relations_for(&self, resource: &str) -> Result<Vec<RelationshipDecl>, SchemaError> {
        if !self.resources.contains_key(resource) {
            return Err(SchemaError::UnknownResource(resource.to_owned()));
        }
        Ok(self
            .relations
            .iter()
            .filter(|r| r.child_resource == resource)
            .cloned()
            .collect())
    }

    /// Serializes the registry back to the schema file format.
    pub fn to_schema_text(&self) -> String {
        let mut out = String::from("resources:\n");
        for resource in self.resources.values() {
            out.push_str(&format!("  {}:\n", resource.name));
            out.push_str(&format!("    primary_key: {}\n", resource.primary_key));
            if let Some(ti) = &resource.time_index {
                out.push_str(&format!("    time_index: {ti}\n"));
            }
            out.push_str("    variables:\n");
            for var in &resource.variables {
                let default_nullable = var.semantic != SemanticType::Id;
                let marker = if var.nullable == default_nullable {
                    ""
                } else if var.nullable {
                    "?"
                } else {
                    "!"
                };
                out.push_str(&format!("      {}: {}{}\n", var.name, var.semantic, marker));
            }
        }
        out.push_str("relations:\n");
        for rel in &self.relations {
            out.push_str(&format!("  - {rel}\n"));
        }
        out
    }
}

/// The bundled 12-resource reference schema (administration + clinical subset).
pub fn bundled_reference_schema() -> SchemaRegistry {
    parse_schema(include_str!("../assets/fhir12.yaml")).expect("bundled reference schema is valid")
}

/// The bundled 9-resource appointment schema used for no-show prediction.
pub fn bundled_appointment_schema() -> SchemaRegistry {
    parse_schema(include_str!("../assets/appointment9.yaml"))
        .expect("bundled appointment schema is valid")
}

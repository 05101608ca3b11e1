//! Adaptive data assembly: ingest whatever CSV files exist for a schema,
//! load the variables that are present, skip the ones that are not, keep
//! only relations whose endpoints loaded and whose foreign keys resolve,
//! and repair relation cycles so the result is an acyclic entityset.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{RelationshipDecl, ResourceSchema, SchemaRegistry, SemanticType};
use crate::table::{AssemblyNote, Column, ColumnValues, Entity, EntitySet, NoteKind, TableError};

/// Fraction of dangling foreign-key values above which a relation is dropped
/// instead of having the offending cells nulled.
const DANGLING_FK_DROP_THRESHOLD: f64 = 0.05;

#[derive(Debug, Error)]
pub enum AssembleError {
    #[error("no CSV file in {0} matches any declared resource")]
    NoRecognizedFiles(String),
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse {path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{entity}.{column} row {row}: cannot coerce `{cell}` to {expected}")]
    TypeCoercion {
        entity: String,
        column: String,
        row: usize,
        cell: String,
        expected: SemanticType,
    },
    #[error(transparent)]
    Table(#[from] TableError),
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AssembleOptions {
    /// When set, a cell that cannot be coerced to its declared type is an
    /// error instead of being nulled with a note.
    pub strict: bool,
}

/// Loads every recognized resource file in `data_dir` and wires up the
/// relations that survive loading, integrity checks, and cycle repair.
pub fn assemble(data_dir: impl AsRef<Path>, registry: &SchemaRegistry) -> Result<EntitySet, AssembleError> {
    assemble_with(data_dir, registry, AssembleOptions::default())
}

pub fn assemble_with(
    data_dir: impl AsRef<Path>,
    registry: &SchemaRegistry,
    options: AssembleOptions,
) -> Result<EntitySet, AssembleError> {
    let data_dir = data_dir.as_ref();
    let files = discover_files(data_dir, registry)?;
    if files.is_empty() {
        return Err(AssembleError::NoRecognizedFiles(data_dir.display().to_string()));
    }

    let mut entities = BTreeMap::new();
    let mut notes = Vec::new();

    // Resources iterate in name order so notes are reproducible.
    for (name, resource) in &registry.resources {
        match files.get(name) {
            Some(path) => {
                let entity = load_resource(path, resource, options, &mut notes)?;
                entities.insert(name.clone(), entity);
            }
            None => notes.push(AssemblyNote::new(
                NoteKind::MissingResource,
                name.clone(),
                "no data file found",
            )),
        }
    }

    let mut relations = Vec::new();
    for rel in &registry.relations {
        match activate_relation(rel, &mut entities, &mut notes) {
            Some(active) => relations.push(active),
            None => {}
        }
    }

    let entityset = EntitySet {
        entities,
        relations,
        notes,
    };
    Ok(resolve_cycles(entityset))
}

fn discover_files(
    data_dir: &Path,
    registry: &SchemaRegistry,
) -> Result<BTreeMap<String, PathBuf>, AssembleError> {
    let mut files = BTreeMap::new();
    let entries = std::fs::read_dir(data_dir).map_err(|source| AssembleError::Io {
        path: data_dir.display().to_string(),
        source,
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|ext| ext.eq_ignore_ascii_case("csv"))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    for path in paths {
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        let matched = registry
            .resources
            .keys()
            .find(|name| name.eq_ignore_ascii_case(stem));
        if let Some(name) = matched {
            files.entry(name.clone()).or_insert(path);
        }
    }
    Ok(files)
}

fn load_resource(
    path: &Path,
    resource: &ResourceSchema,
    options: AssembleOptions,
    notes: &mut Vec<AssemblyNote>,
) -> Result<Entity, AssembleError> {
    let path_str = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|source| AssembleError::Csv {
            path: path_str.clone(),
            source,
        })?;
    let headers = reader
        .headers()
        .map_err(|source| AssembleError::Csv {
            path: path_str.clone(),
            source,
        })?
        .clone();

    // Map declared variables onto CSV columns; absent variables get a note.
    let mut present: Vec<(usize, usize)> = Vec::new(); // (variable idx, csv idx)
    for (vi, var) in resource.variables.iter().enumerate() {
        match headers.iter().position(|h| h.eq_ignore_ascii_case(&var.name)) {
            Some(ci) => present.push((vi, ci)),
            None => notes.push(AssemblyNote::new(
                NoteKind::MissingVariable,
                format!("{}.{}", resource.name, var.name),
                "variable absent from data file",
            )),
        }
    }

    let mut columns: Vec<Column> = present
        .iter()
        .map(|(vi, _)| {
            let decl = resource.variables[*vi].clone();
            let values = ColumnValues::new_for(decl.semantic);
            Column { decl, values }
        })
        .collect();
    let mut coercion_failures: Vec<usize> = vec![0; columns.len()];

    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|source| AssembleError::Csv {
            path: path_str.clone(),
            source,
        })?;
        for (slot, (_, ci)) in present.iter().enumerate() {
            let cell = record.get(*ci).unwrap_or("");
            let column = &mut columns[slot];
            if cell.is_empty() {
                column.values.push_null();
                continue;
            }
            match coerce(cell, column.decl.semantic) {
                Some(value) => push_value(&mut column.values, value),
                None if options.strict => {
                    return Err(AssembleError::TypeCoercion {
                        entity: resource.name.clone(),
                        column: column.decl.name.clone(),
                        row: row_idx,
                        cell: cell.to_owned(),
                        expected: column.decl.semantic,
                    })
                }
                None => {
                    column.values.push_null();
                    coercion_failures[slot] += 1;
                }
            }
        }
    }

    for (slot, failures) in coercion_failures.iter().enumerate() {
        if *failures > 0 {
            notes.push(AssemblyNote::new(
                NoteKind::MissingVariable,
                format!("{}.{}", resource.name, columns[slot].decl.name),
                format!(
                    "{failures} cell(s) could not be coerced to {} and were nulled",
                    columns[slot].decl.semantic
                ),
            ));
        }
    }

    Ok(Entity::new(
        resource.name.clone(),
        resource.primary_key.clone(),
        resource.time_index.clone(),
        columns,
    )?)
}

enum Coerced {
    Number(f64),
    Text(String),
    Timestamp(NaiveDateTime),
    Bool(bool),
}

fn coerce(cell: &str, semantic: SemanticType) -> Option<Coerced> {
    match semantic {
        SemanticType::Numeric => cell.trim().parse::<f64>().ok().map(Coerced::Number),
        SemanticType::Boolean => match cell.trim().to_ascii_lowercase().as_str() {
            "true" | "1" | "yes" => Some(Coerced::Bool(true)),
            "false" | "0" | "no" => Some(Coerced::Bool(false)),
            _ => None,
        },
        SemanticType::Datetime => parse_datetime(cell.trim()).map(Coerced::Timestamp),
        SemanticType::Id | SemanticType::ForeignKey | SemanticType::Categorical | SemanticType::Text => {
            Some(Coerced::Text(cell.to_owned()))
        }
    }
}

fn push_value(values: &mut ColumnValues, value: Coerced) {
    match (values, value) {
        (ColumnValues::Numeric(v), Coerced::Number(x)) => v.push(Some(x)),
        (ColumnValues::Text(v), Coerced::Text(x)) => v.push(Some(x)),
        (ColumnValues::Datetime(v), Coerced::Timestamp(x)) => v.push(Some(x)),
        (ColumnValues::Boolean(v), Coerced::Bool(x)) => v.push(Some(x)),
        _ => unreachable!("coerce() returns the variant matching the column type"),
    }
}

/// ISO-8601 with optional time component; naive timestamps are taken as UTC.
pub fn parse_datetime(text: &str) -> Option<NaiveDateTime> {
    for format in [
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
    ] {
        if let Ok(t) = NaiveDateTime::parse_from_str(text, format) {
            return Some(t);
        }
    }
    // Accept trailing Z / UTC offset by stripping it.
    if let Some(stripped) = text.strip_suffix('Z') {
        if let Some(t) = parse_datetime(stripped) {
            return Some(t);
        }
    }
    chrono::NaiveDate::parse_from_str(text, "%Y-%m-%d")
        .ok()
        .map(|d| d.and_hms_opt(0, 0, 0).expect("midnight is valid"))
}

/// Checks one declared relation against the loaded entities. Returns the
/// relation if it stays active; otherwise records why it did not.
fn activate_relation(
    rel: &RelationshipDecl,
    entities: &mut BTreeMap<String, Entity>,
    notes: &mut Vec<AssemblyNote>,
) -> Option<RelationshipDecl> {
    let rel_str = rel.to_string();
    let endpoints_loaded = entities.contains_key(&rel.child_resource)
        && entities.contains_key(&rel.parent_resource)
        && entities[&rel.child_resource].column(&rel.child_variable).is_some()
        && entities[&rel.parent_resource].column(&rel.parent_variable).is_some();
    if !endpoints_loaded {
        notes.push(AssemblyNote::new(
            NoteKind::BrokenLink,
            rel_str,
            "dropped: endpoint resource or variable did not load",
        ));
        return None;
    }

    // Referential integrity: count child FK values absent from the parent index.
    let parent = &entities[&rel.parent_resource];
    let child = &entities[&rel.child_resource];
    let fk = child.column(&rel.child_variable).expect("checked above");
    let mut non_null = 0usize;
    let mut dangling_rows: Vec<usize> = Vec::new();
    for row in 0..child.row_count() {
        if let Some(value) = fk.text(row) {
            non_null += 1;
            if parent.row_of(value).is_none() {
                dangling_rows.push(row);
            }
        }
    }
    if dangling_rows.is_empty() {
        return Some(rel.clone());
    }

    let fraction = dangling_rows.len() as f64 / non_null as f64;
    if fraction < DANGLING_FK_DROP_THRESHOLD {
        let count = dangling_rows.len();
        let child_entity = entities.get_mut(&rel.child_resource).expect("checked above");
        null_fk_rows(child_entity, &rel.child_variable, &dangling_rows);
        notes.push(AssemblyNote::new(
            NoteKind::BrokenLink,
            rel_str,
            format!("{count} of {non_null} foreign-key value(s) had no parent row and were nulled"),
        ));
        Some(rel.clone())
    } else {
        notes.push(AssemblyNote::new(
            NoteKind::BrokenLink,
            rel_str,
            format!(
                "dropped: {} of {non_null} foreign-key value(s) had no parent row",
                dangling_rows.len()
            ),
        ));
        None
    }
}

fn null_fk_rows(entity: &mut Entity, column: &str, rows: &[usize]) {
    // Entity columns are only reachable immutably; rebuild the column in place.
    let mut columns: Vec<Column> = entity.columns().to_vec();
    for col in &mut columns {
        if col.decl.name == column {
            if let ColumnValues::Text(values) = &mut col.values {
                for &row in rows {
                    values[row] = None;
                }
            }
        }
    }
    *entity = Entity::new(
        entity.name.clone(),
        entity.index.clone(),
        entity.time_index.clone(),
        columns,
    )
    .expect("nulling foreign keys preserves entity invariants");
}

/// Breaks every directed cycle among the active relations. From each cycle
/// found, the edge whose `(child_resource, child_variable)` pair is
/// lexicographically greatest is removed and logged as a consolidation.
pub fn resolve_cycles(mut entityset: EntitySet) -> EntitySet {
    loop {
        let Some(cycle) = find_cycle(&entityset.relations) else {
            break;
        };
        let victim_pos = cycle
            .iter()
            .copied()
            .max_by_key(|&i| {
                let r = &entityset.relations[i];
                (r.child_resource.clone(), r.child_variable.clone())
            })
            .expect("cycles contain at least one edge");
        let removed = entityset.relations.remove(victim_pos);
        entityset.notes.push(AssemblyNote::new(
            NoteKind::Consolidated,
            removed.to_string(),
            "removed to break a relationship cycle",
        ));
    }
    entityset
}

/// Finds one directed cycle, returned as indices into `relations`.
/// Deterministic: DFS starts from child resources in sorted order and walks
/// edges in declaration order.
fn find_cycle(relations: &[RelationshipDecl]) -> Option<Vec<usize>> {
    let mut nodes: Vec<&str> = relations
        .iter()
        .flat_map(|r| [r.child_resource.as_str(), r.parent_resource.as_str()])
        .collect();
    nodes.sort_unstable();
    nodes.dedup();

    let mut visited: HashSet<&str> = HashSet::new();
    for &start in &nodes {
        if visited.contains(start) {
            continue;
        }
        // Stack of (node, edge index used to reach it).
        let mut path: Vec<(&str, Option<usize>)> = vec![(start, None)];
        let mut on_path: HashSet<&str> = [start].into();
        let mut edge_cursor: Vec<usize> = vec![0];

        while let Some(&(current, _)) = path.last() {
            let cursor = edge_cursor.last_mut().expect("cursor tracks path");
            let next_edge = relations
                .iter()
                .enumerate()
                .skip(*cursor)
                .find(|(_, r)| r.child_resource == current);
            match next_edge {
                Some((ei, rel)) => {
                    *cursor = ei + 1;
                    let target = rel.parent_resource.as_str();
                    if on_path.contains(target) {
                        // Collect edges from `target`'s position on the path.
                        let mut cycle: Vec<usize> = path
                            .iter()
                            .skip_while(|(n, _)| *n != target)
                            .filter_map(|(_, e)| *e)
                            .collect();
                        cycle.push(ei);
                        return Some(cycle);
                    }
                    if !visited.contains(target) {
                        path.push((target, Some(ei)));
                        on_path.insert(target);
                        edge_cursor.push(0);
                    }
                }
                None => {
                    visited.insert(current);
                    on_path.remove(current);
                    path.pop();
                    edge_cursor.pop();
                }
            }
        }
    }
    None
}

/// True when the active relation graph has no directed cycle.
pub fn is_acyclic(relations: &[RelationshipDecl]) -> bool {
    find_cycle(relations).is_none()
}

/// Flat summary of an assembled entityset, the "data assembler" section of
/// the metadata report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssemblyManifest {
    pub resources: Vec<ResourceSummary>,
    pub loaded_resource_count: usize,
    pub loaded_variable_count: usize,
    pub active_relations: Vec<String>,
    pub notes: Vec<AssemblyNote>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResourceSummary {
    pub name: String,
    pub rows: usize,
    pub loaded_variables: usize,
}

impl AssemblyManifest {
    pub fn from_entityset(entityset: &EntitySet) -> Self {
        let resources: Vec<ResourceSummary> = entityset
            .entities
            .values()
            .map(|e| ResourceSummary {
                name: e.name.clone(),
                rows: e.row_count(),
                loaded_variables: e.columns().len(),
            })
            .collect();
        AssemblyManifest {
            loaded_resource_count: resources.len(),
            loaded_variable_count: entityset.loaded_variable_count(),
            active_relations: entityset.relations.iter().map(|r| r.to_string()).collect(),
            notes: entityset.notes.clone(),
            resources,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("Data assembler\n");
        out.push_str(&format!("  No. of loaded resources  {}\n", self.loaded_resource_count));
        out.push_str(&format!("  No. of loaded variables  {}\n", self.loaded_variable_count));
        for r in &self.resources {
            out.push_str(&format!("    {:<16} {:>8} rows, {} variables\n", r.name, r.rows, r.loaded_variables));
        }
        out.push_str("  Active relations\n");
        for rel in &self.active_relations {
            out.push_str(&format!("    {rel}\n"));
        }
        if !self.notes.is_empty() {
            out.push_str("  Notes\n");
            for note in &self.notes {
                out.push_str(&format!("    [{}] {}: {}\n", note.kind, note.subject, note.detail));
            }
        }
        out
    }
}

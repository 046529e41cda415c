//! Relational schemas: the table model, DDL in and out, and heuristic
//! normal-form checks.
//!
//! Every table carries one of four [`Archetype`]s. [`parse_ddl`] infers
//! them unless the DDL carries `-- archetype: <name>` annotations, which
//! [`emit_ddl`] always writes so that a parse of emitted DDL is exact.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

/// Default name of the column that ties a row to a point in time.
pub const DEFAULT_ANCHOR: &str = "snapshot_id";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SchemaError {
    #[error("DDL statement {statement}: {message}")]
    Parse { statement: usize, message: String },
    #[error("invalid schema: {}", join_issues(.0))]
    Structural(Vec<Violation>),
    #[error("foreign keys form a cycle: {}", .0.join(" -> "))]
    Cycle(Vec<String>),
}

fn join_issues(issues: &[Violation]) -> String {
    issues.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SqlType {
    Integer,
    Real,
    Text,
    Date,
}

impl SqlType {
    pub fn as_str(self) -> &'static str {
        match self {
            SqlType::Integer => "INTEGER",
            SqlType::Real => "REAL",
            SqlType::Text => "TEXT",
            SqlType::Date => "DATE",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    /// Core things with their own identity.
    Entity,
    /// Small lookup vocabularies (roles, formats, medal types).
    Attribute,
    /// Time-varying facts keyed by the temporal anchor.
    Snapshot,
    /// Many-to-many links, keyed entirely by foreign keys.
    Bridge,
}

impl Archetype {
    pub const ALL: [Archetype; 4] =
        [Archetype::Entity, Archetype::Attribute, Archetype::Snapshot, Archetype::Bridge];

    pub fn as_str(self) -> &'static str {
        match self {
            Archetype::Entity => "entity",
            Archetype::Attribute => "attribute",
            Archetype::Snapshot => "snapshot",
            Archetype::Bridge => "bridge",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.as_str().eq_ignore_ascii_case(s.trim()))
    }
}

impl fmt::Display for Archetype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnDef {
    pub name: String,
    pub sql_type: SqlType,
    pub nullable: bool,
    pub is_primary_key_part: bool,
    /// Declared as an array or JSON type: holds several values per cell.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub multi_valued: bool,
}

impl ColumnDef {
    pub fn new(name: &str, sql_type: SqlType) -> Self {
        Self { name: name.to_string(), sql_type, nullable: true, is_primary_key_part: false, multi_valued: false }
    }

    pub fn not_null(mut self) -> Self {
        self.nullable = false;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForeignKeyDef {
    pub from_columns: Vec<String>,
    pub to_table: String,
    pub to_columns: Vec<String>,
}

impl ForeignKeyDef {
    pub fn new(from: &[&str], to_table: &str, to: &[&str]) -> Self {
        Self {
            from_columns: from.iter().map(|s| s.to_string()).collect(),
            to_table: to_table.to_string(),
            to_columns: to.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableDef {
    pub name: String,
    pub archetype: Archetype,
    pub columns: Vec<ColumnDef>,
    pub primary_key: Vec<String>,
    pub foreign_keys: Vec<ForeignKeyDef>,
    /// UNIQUE constraints, single- or multi-column.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unique_keys: Vec<Vec<String>>,
}

impl TableDef {
    /// Builds a table and marks primary-key columns as non-null key parts.
    pub fn new(
        name: &str,
        archetype: Archetype,
        columns: Vec<ColumnDef>,
        primary_key: &[&str],
        foreign_keys: Vec<ForeignKeyDef>,
    ) -> Self {
        let mut t = Self {
            name: name.to_string(),
            archetype,
            columns,
            primary_key: primary_key.iter().map(|s| s.to_string()).collect(),
            foreign_keys,
            unique_keys: Vec::new(),
        };
        t.mark_key_columns();
        t
    }

    pub fn with_unique(mut self, columns: &[&str]) -> Self {
        self.unique_keys.push(columns.iter().map(|s| s.to_string()).collect());
        self
    }

    fn mark_key_columns(&mut self) {
        for c in &mut self.columns {
            if self.primary_key.iter().any(|k| k.eq_ignore_ascii_case(&c.name)) {
                c.is_primary_key_part = true;
                c.nullable = false;
            }
        }
    }

    pub fn column(&self, name: &str) -> Option<&ColumnDef> {
        self.columns.iter().find(|c| c.name.eq_ignore_ascii_case(name))
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.column(name).is_some()
    }

    pub fn is_key_column(&self, name: &str) -> bool {
        self.primary_key.iter().any(|k| k.eq_ignore_ascii_case(name))
    }

    /// True when the column alone is a primary or unique key.
    pub fn is_single_column_key(&self, name: &str) -> bool {
        let single = |cols: &[String]| cols.len() == 1 && cols[0].eq_ignore_ascii_case(name);
        single(&self.primary_key) || self.unique_keys.iter().any(|u| single(u))
    }

    pub fn anchor_column(&self, anchor: &str) -> Option<&ColumnDef> {
        self.columns.iter().find(|c| same_anchor(&c.name, anchor))
    }

    fn fk_columns(&self) -> BTreeSet<String> {
        self.foreign_keys
            .iter()
            .flat_map(|fk| fk.from_columns.iter().map(|c| c.to_lowercase()))
            .collect()
    }
}

/// `snapshot_id`, `SnapshotID` and `snapshotid` all name the same anchor.
pub fn same_anchor(column: &str, anchor: &str) -> bool {
    let key = |s: &str| s.to_lowercase().replace('_', "");
    key(column) == key(anchor)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationalSchema {
    pub domain: String,
    pub tables: Vec<TableDef>,
}

impl RelationalSchema {
    pub fn table(&self, name: &str) -> Option<&TableDef> {
        self.tables.iter().find(|t| t.name.eq_ignore_ascii_case(name))
    }

    pub fn tables_of(&self, archetype: Archetype) -> impl Iterator<Item = &TableDef> {
        self.tables.iter().filter(move |t| t.archetype == archetype)
    }

    pub fn archetype_counts(&self) -> BTreeMap<Archetype, usize> {
        let mut counts = BTreeMap::new();
        for t in &self.tables {
            *counts.entry(t.archetype).or_insert(0) += 1;
        }
        counts
    }

    /// Every invariant violation, schema-level ones included.
    pub fn structural_issues(&self) -> Vec<Violation> {
        let mut issues = table_issues(self);
        if self.tables.is_empty() {
            issues.push(Violation::schema("schema has no tables"));
        } else if self.tables_of(Archetype::Snapshot).next().is_none() {
            issues.push(Violation::schema("schema has no snapshot table"));
        }
        issues
    }

    /// Equality up to table order and the non-null flag implied by key membership.
    pub fn equivalent(&self, other: &RelationalSchema) -> bool {
        fn canon(s: &RelationalSchema) -> RelationalSchema {
            let mut s = s.clone();
            for t in &mut s.tables {
                t.mark_key_columns();
            }
            s.domain.clear();
            s.tables.sort_by_key(|t| t.name.to_lowercase());
            s
        }
        canon(self) == canon(other)
    }

    /// Tables and the tables they reference, as `(archetype, [(fk target archetype)])`
    /// sorted, for comparing schema shape without regard to names.
    pub fn shape(&self) -> Vec<(Archetype, Vec<Archetype>)> {
        let mut shape: Vec<_> = self
            .tables
            .iter()
            .map(|t| {
                let mut targets: Vec<_> = t
                    .foreign_keys
                    .iter()
                    .filter_map(|fk| self.table(&fk.to_table).map(|x| x.archetype))
                    .collect();
                targets.sort();
                (t.archetype, targets)
            })
            .collect();
        shape.sort();
        shape
    }
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Per-table invariants plus uniqueness and resolution of names across tables.
fn table_issues(schema: &RelationalSchema) -> Vec<Violation> {
    let mut issues = Vec::new();
    let mut seen_tables = HashSet::new();
    for t in &schema.tables {
        let mut issue = |column: Option<&str>, reason: String| {
            issues.push(Violation::new(&t.name, column, &[], reason))
        };
        if !is_identifier(&t.name) {
            issue(None, format!("table name {:?} is not an identifier", t.name));
        }
        if !seen_tables.insert(t.name.to_lowercase()) {
            issue(None, "duplicate table name".into());
        }
        if t.columns.is_empty() {
            issue(None, "table has no columns".into());
        }
        let mut seen_cols = HashSet::new();
        for c in &t.columns {
            if !is_identifier(&c.name) {
                issue(Some(&c.name), "column name is not an identifier".into());
            }
            if !seen_cols.insert(c.name.to_lowercase()) {
                issue(Some(&c.name), "duplicate column name".into());
            }
        }
        if t.primary_key.is_empty() {
            issue(None, "table has no primary key".into());
        }
        for k in &t.primary_key {
            if !t.has_column(k) {
                issue(Some(k), "primary key names a missing column".into());
            }
        }
        for u in &t.unique_keys {
            for k in u {
                if !t.has_column(k) {
                    issue(Some(k), "unique constraint names a missing column".into());
                }
            }
        }
        for fk in &t.foreign_keys {
            if fk.from_columns.is_empty() || fk.from_columns.len() != fk.to_columns.len() {
                issue(None, format!("foreign key to {} has mismatched column lists", fk.to_table));
            }
            for c in &fk.from_columns {
                if !t.has_column(c) {
                    issue(Some(c), "foreign key names a missing column".into());
                }
            }
            match schema.table(&fk.to_table) {
                None => issue(None, format!("foreign key references missing table {}", fk.to_table)),
                Some(target) => {
                    for c in &fk.to_columns {
                        if !target.has_column(c) {
                            issue(None, format!("foreign key references missing column {}.{c}", target.name));
                        }
                    }
                }
            }
        }
        match t.archetype {
            Archetype::Snapshot => {
                let anchored = t.primary_key.iter().any(|k| same_anchor(k, DEFAULT_ANCHOR));
                if !anchored {
                    issue(None, format!("snapshot table key lacks {DEFAULT_ANCHOR}"));
                }
            }
            Archetype::Bridge => {
                let fk_cols = t.fk_columns();
                if t.primary_key.len() < 2 {
                    issue(None, "bridge table needs a composite primary key".into());
                } else if let Some(k) = t.primary_key.iter().find(|k| !fk_cols.contains(&k.to_lowercase())) {
                    issue(Some(k), "bridge key column is not a foreign key".into());
                }
            }
            Archetype::Entity | Archetype::Attribute => {}
        }
    }
    issues
}

// ---------------------------------------------------------------------------
// Normal-form checks

/// One finding. `determinant` is empty for atomicity and structural findings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub table: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub determinant: Vec<String>,
    pub reason: String,
}

impl Violation {
    fn new(table: &str, column: Option<&str>, determinant: &[String], reason: String) -> Self {
        Self {
            table: table.to_string(),
            column: column.map(str::to_string),
            determinant: determinant.to_vec(),
            reason,
        }
    }

    fn schema(reason: &str) -> Self {
        Self::new("", None, &[], reason.to_string())
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.table.is_empty() {
            return f.write_str(&self.reason);
        }
        f.write_str(&self.table)?;
        if let Some(c) = &self.column {
            write!(f, ".{c}")?;
        }
        if !self.determinant.is_empty() {
            write!(f, " <- ({})", self.determinant.join(", "))?;
        }
        write!(f, ": {}", self.reason)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizationReport {
    pub atomicity_violations: Vec<Violation>,
    pub partial_dependency_violations: Vec<Violation>,
    pub transitive_dependency_violations: Vec<Violation>,
    pub structural_violations: Vec<Violation>,
    /// Holds exactly when every list above is empty.
    pub passed: bool,
}

impl NormalizationReport {
    pub fn violation_count(&self) -> usize {
        self.atomicity_violations.len()
            + self.partial_dependency_violations.len()
            + self.transitive_dependency_violations.len()
            + self.structural_violations.len()
    }

    pub fn summary(&self) -> String {
        format!(
            "{}: atomicity {}, partial dependency {}, transitive dependency {}, structural {}",
            if self.passed { "passed" } else { "failed" },
            self.atomicity_violations.len(),
            self.partial_dependency_violations.len(),
            self.transitive_dependency_violations.len(),
            self.structural_violations.len(),
        )
    }
}

/// Rows sampled from one table. Cells are the text rendering of the stored
/// value; `None` is SQL NULL.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TableSample {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Option<String>>>,
}

impl TableSample {
    pub fn new(columns: &[&str]) -> Self {
        Self { columns: columns.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn row(mut self, cells: &[Option<&str>]) -> Self {
        self.rows.push(cells.iter().map(|c| c.map(str::to_string)).collect());
        self
    }

    fn index(&self, column: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.eq_ignore_ascii_case(column))
    }

    fn values<'a>(&'a self, column: &str) -> impl Iterator<Item = &'a str> + 'a {
        let idx = self.index(column);
        self.rows.iter().filter_map(move |r| idx.and_then(|i| r.get(i)?.as_deref()))
    }
}

pub type Samples = BTreeMap<String, TableSample>;

pub(crate) const NAME_FLAGS: [&str; 7] = ["and", "or", "list", "lists", "csv", "pair", "pairs"];

/// Lower-cased words of an identifier, split on underscores and case changes.
pub(crate) fn name_tokens(name: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for part in name.split('_').filter(|p| !p.is_empty()) {
        let chars: Vec<char> = part.chars().collect();
        let mut cur = String::new();
        for (i, &c) in chars.iter().enumerate() {
            let boundary = i > 0
                && c.is_uppercase()
                && (chars[i - 1].is_lowercase()
                    || chars[i - 1].is_ascii_digit()
                    || chars.get(i + 1).is_some_and(|n| n.is_lowercase()) && chars[i - 1].is_uppercase());
            if boundary && !cur.is_empty() {
                tokens.push(std::mem::take(&mut cur).to_lowercase());
            }
            cur.push(c);
        }
        if !cur.is_empty() {
            tokens.push(cur.to_lowercase());
        }
    }
    tokens
}

fn looks_composite(value: &str) -> Option<&'static str> {
    let v = value.trim();
    if crate::ingest::normalize_null(v).is_null() {
        return None;
    }
    if regex!(r"\S\s*/\s*\S").is_match(v) {
        return Some("embedded '/' separator");
    }
    if regex!(r"^[^()]*\S\s*\([^()]+\)$").is_match(v) {
        return Some("parenthesized suffix");
    }
    if v.contains(',') && crate::ingest::safe_real(v).is_null() && regex!(r"^[^,]+(,\s*[^,]+)+$").is_match(v) {
        return Some("comma-joined list");
    }
    None
}

/// Whether `determinant -> dependent` holds in the sample. Rows with a null
/// determinant are skipped. A determinant value needs at least 2 rows to count
/// as evidence, at least 2 such values are required, no value may map to two
/// different dependents, and a dependent that is constant everywhere proves
/// nothing.
fn fd_holds(sample: &TableSample, determinant: &[usize], dependent: usize) -> bool {
    let mut groups: HashMap<Vec<&str>, (usize, BTreeSet<Option<&str>>)> = HashMap::new();
    let mut all_dep = BTreeSet::new();
    for row in &sample.rows {
        let key: Option<Vec<&str>> = determinant.iter().map(|&i| row.get(i).and_then(|c| c.as_deref())).collect();
        let dep = row.get(dependent).and_then(|c| c.as_deref());
        all_dep.insert(dep);
        let Some(key) = key else { continue };
        let g = groups.entry(key).or_default();
        g.0 += 1;
        g.1.insert(dep);
    }
    if all_dep.len() < 2 {
        return false;
    }
    let mut supported = 0;
    for (count, deps) in groups.values() {
        if deps.len() > 1 {
            return false;
        }
        if *count >= 2 {
            supported += 1;
        }
    }
    supported >= 2
}

/// Heuristic normal-form report. Without samples only declarative checks run.
pub fn validate_3nf(schema: &RelationalSchema, samples: Option<&Samples>) -> NormalizationReport {
    let mut atomicity = Vec::new();
    let mut partial = Vec::new();
    let mut transitive = Vec::new();
    let structural = schema.structural_issues();

    for t in &schema.tables {
        let sample = samples.and_then(|s| s.iter().find(|(k, _)| k.eq_ignore_ascii_case(&t.name)).map(|(_, v)| v));
        for c in &t.columns {
            let mut reasons = Vec::new();
            if c.multi_valued {
                reasons.push("declared multi-valued type".to_string());
            }
            let tokens = name_tokens(&c.name);
            if tokens.len() > 1 && tokens.iter().any(|tok| NAME_FLAGS.contains(&tok.as_str())) {
                reasons.push("name suggests several values".to_string());
            }
            if let (Some(sample), SqlType::Text) = (sample, c.sql_type) {
                if let Some((v, why)) = sample.values(&c.name).find_map(|v| looks_composite(v).map(|w| (v, w))) {
                    reasons.push(format!("sampled value {v:?} has {why}"));
                }
            }
            if !reasons.is_empty() {
                atomicity.push(Violation::new(&t.name, Some(&c.name), &[], reasons.join("; ")));
            }
        }

        let Some(sample) = sample else { continue };
        let Some(pk_idx): Option<Vec<usize>> = t.primary_key.iter().map(|k| sample.index(k)).collect() else {
            continue;
        };
        let non_key: Vec<&ColumnDef> = t.columns.iter().filter(|c| !t.is_key_column(&c.name)).collect();

        if t.primary_key.len() >= 2 && t.primary_key.len() <= 8 {
            let n = t.primary_key.len();
            for c in &non_key {
                let Some(dep) = sample.index(&c.name) else { continue };
                let mut found: Vec<u32> = Vec::new();
                for mask in 1u32..(1 << n) - 1 {
                    if found.iter().any(|f| f & mask == *f) {
                        continue;
                    }
                    let subset: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
                    let cols: Vec<usize> = subset.iter().map(|&i| pk_idx[i]).collect();
                    if fd_holds(sample, &cols, dep) {
                        found.push(mask);
                        let det: Vec<String> = subset.iter().map(|&i| t.primary_key[i].clone()).collect();
                        partial.push(Violation::new(
                            &t.name,
                            Some(&c.name),
                            &det,
                            "determined by part of the primary key".into(),
                        ));
                    }
                }
            }
        }

        for a in &non_key {
            if t.is_single_column_key(&a.name) {
                continue;
            }
            let Some(ai) = sample.index(&a.name) else { continue };
            for b in &non_key {
                if a.name == b.name {
                    continue;
                }
                let Some(bi) = sample.index(&b.name) else { continue };
                if fd_holds(sample, &[ai], bi) {
                    transitive.push(Violation::new(
                        &t.name,
                        Some(&b.name),
                        std::slice::from_ref(&a.name),
                        "determined by a non-key column".into(),
                    ));
                }
            }
        }
    }

    let passed = atomicity.is_empty() && partial.is_empty() && transitive.is_empty() && structural.is_empty();
    NormalizationReport {
        atomicity_violations: atomicity,
        partial_dependency_violations: partial,
        transitive_dependency_violations: transitive,
        structural_violations: structural,
        passed,
    }
}

// ---------------------------------------------------------------------------
// DDL emission

fn dependency_order(schema: &RelationalSchema) -> Result<Vec<&TableDef>, SchemaError> {
    let index: HashMap<String, usize> =
        schema.tables.iter().enumerate().map(|(i, t)| (t.name.to_lowercase(), i)).collect();
    let deps: Vec<BTreeSet<usize>> = schema
        .tables
        .iter()
        .enumerate()
        .map(|(i, t)| {
            t.foreign_keys
                .iter()
                .filter_map(|fk| index.get(&fk.to_table.to_lowercase()).copied())
                .filter(|&j| j != i)
                .collect()
        })
        .collect();
    let mut done = vec![false; schema.tables.len()];
    let mut order = Vec::with_capacity(schema.tables.len());
    while order.len() < schema.tables.len() {
        let next = (0..schema.tables.len()).find(|&i| !done[i] && deps[i].iter().all(|&d| done[d]));
        match next {
            Some(i) => {
                done[i] = true;
                order.push(&schema.tables[i]);
            }
            None => return Err(SchemaError::Cycle(find_cycle(schema, &deps, &done))),
        }
    }
    Ok(order)
}

fn find_cycle(schema: &RelationalSchema, deps: &[BTreeSet<usize>], done: &[bool]) -> Vec<String> {
    let start = (0..deps.len()).find(|&i| !done[i]).expect("a pending table exists");
    let mut path = vec![start];
    let mut cur = start;
    loop {
        // every pending table has a pending dependency, so this walk must revisit a node
        let next = *deps[cur].iter().find(|&&d| !done[d]).expect("pending dependency");
        if let Some(pos) = path.iter().position(|&p| p == next) {
            let mut cycle: Vec<String> = path[pos..].iter().map(|&i| schema.tables[i].name.clone()).collect();
            cycle.push(schema.tables[next].name.clone());
            return cycle;
        }
        path.push(next);
        cur = next;
    }
}

/// CREATE TABLE statements, referenced tables first, ties in declaration order.
/// SQLite's reserved words; such names need quoting.
pub(crate) const SQLITE_KEYWORDS: [&str; 147] = [
    "ABORT", "ACTION", "ADD", "AFTER", "ALL", "ALTER", "ALWAYS", "ANALYZE", "AND", "AS",
    "ASC", "ATTACH", "AUTOINCREMENT", "BEFORE", "BEGIN", "BETWEEN", "BY", "CASCADE", "CASE", "CAST",
    "CHECK", "COLLATE", "COLUMN", "COMMIT", "CONFLICT", "CONSTRAINT", "CREATE", "CROSS", "CURRENT", "CURRENT_DATE",
    "CURRENT_TIME", "CURRENT_TIMESTAMP", "DATABASE", "DEFAULT", "DEFERRABLE", "DEFERRED", "DELETE", "DESC", "DETACH", "DISTINCT",
    "DO", "DROP", "EACH", "ELSE", "END", "ESCAPE", "EXCEPT", "EXCLUDE", "EXCLUSIVE", "EXISTS",
    "EXPLAIN", "FAIL", "FILTER", "FIRST", "FOLLOWING", "FOR", "FOREIGN", "FROM", "FULL", "GENERATED",
    "GLOB", "GROUP", "GROUPS", "HAVING", "IF", "IGNORE", "IMMEDIATE", "IN", "INDEX", "INDEXED",
    "INITIALLY", "INNER", "INSERT", "INSTEAD", "INTERSECT", "INTO", "IS", "ISNULL", "JOIN", "KEY",
    "LAST", "LEFT", "LIKE", "LIMIT", "MATCH", "MATERIALIZED", "NATURAL", "NO", "NOT", "NOTHING",
    "NOTNULL", "NULL", "NULLS", "OF", "OFFSET", "ON", "OR", "ORDER", "OTHERS", "OUTER",
    "OVER", "PARTITION", "PLAN", "PRAGMA", "PRECEDING", "PRIMARY", "QUERY", "RAISE", "RANGE", "RECURSIVE",
    "REFERENCES", "REGEXP", "REINDEX", "RELEASE", "RENAME", "REPLACE", "RESTRICT", "RETURNING", "RIGHT", "ROLLBACK",
    "ROW", "ROWS", "SAVEPOINT", "SELECT", "SET", "TABLE", "TEMP", "TEMPORARY", "THEN", "TIES",
    "TO", "TRANSACTION", "TRIGGER", "UNBOUNDED", "UNION", "UNIQUE", "UPDATE", "USING", "VACUUM", "VALUES",
    "VIEW", "VIRTUAL", "WHEN", "WHERE", "WINDOW", "WITH", "WITHOUT",
];

pub(crate) fn is_keyword(name: &str) -> bool {
    SQLITE_KEYWORDS.binary_search(&name.to_ascii_uppercase().as_str()).is_ok()
}

/// `name`, double-quoted when it is a keyword.
fn ident(name: &str) -> String {
    if is_keyword(name) { format!("\"{name}\"") } else { name.to_string() }
}

fn idents(names: &[String]) -> String {
    names.iter().map(|n| ident(n)).collect::<Vec<_>>().join(", ")
}

pub fn emit_ddl(schema: &RelationalSchema) -> Result<String, SchemaError> {
    let issues = table_issues(schema);
    if !issues.is_empty() {
        return Err(SchemaError::Structural(issues));
    }
    let mut out = String::new();
    for (n, t) in dependency_order(schema)?.into_iter().enumerate() {
        if n > 0 {
            out.push('\n');
        }
        out.push_str(&format!("-- archetype: {}\nCREATE TABLE {} (\n", t.archetype, ident(&t.name)));
        let inline_pk = t.primary_key.len() == 1;
        let mut lines = Vec::new();
        for c in &t.columns {
            let mut line = format!("    {} {}", ident(&c.name), if c.multi_valued { "JSON" } else { c.sql_type.as_str() });
            if inline_pk && t.is_key_column(&c.name) {
                line.push_str(" PRIMARY KEY");
            } else if !c.nullable || c.is_primary_key_part {
                line.push_str(" NOT NULL");
            }
            if t.unique_keys.iter().any(|u| u.len() == 1 && u[0].eq_ignore_ascii_case(&c.name)) {
                line.push_str(" UNIQUE");
            }
            lines.push(line);
        }
        if !inline_pk {
            lines.push(format!("    PRIMARY KEY ({})", idents(&t.primary_key)));
        }
        for u in t.unique_keys.iter().filter(|u| u.len() > 1) {
            lines.push(format!("    UNIQUE ({})", idents(u)));
        }
        for fk in &t.foreign_keys {
            lines.push(format!(
                "    FOREIGN KEY ({}) REFERENCES {} ({})",
                idents(&fk.from_columns),
                ident(&fk.to_table),
                idents(&fk.to_columns)
            ));
        }
        out.push_str(&lines.join(",\n"));
        out.push_str("\n);\n");
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// DDL parsing

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Quoted(String),
    Num(String),
    Str(String),
    Sym(char),
    Annotation(String),
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Word(w) | Tok::Num(w) => f.write_str(w),
            Tok::Quoted(w) => write!(f, "\"{w}\""),
            Tok::Str(s) => write!(f, "'{s}'"),
            Tok::Sym(c) => write!(f, "{c}"),
            Tok::Annotation(a) => write!(f, "-- archetype: {a}"),
        }
    }
}

fn tokenize(ddl: &str) -> Result<Vec<Tok>, String> {
    let chars: Vec<char> = ddl.chars().collect();
    let mut toks = Vec::new();
    let mut i = 0;
    let take_until = |i: &mut usize, close: char| -> Result<String, String> {
        let mut s = String::new();
        *i += 1;
        while *i < chars.len() {
            if chars[*i] == close {
                if chars.get(*i + 1) == Some(&close) && close != ']' {
                    s.push(close);
                    *i += 2;
                    continue;
                }
                *i += 1;
                return Ok(s);
            }
            s.push(chars[*i]);
            *i += 1;
        }
        Err(format!("unterminated {close} quote"))
    };
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '-' && chars.get(i + 1) == Some(&'-') {
            let start = i + 2;
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            let comment: String = chars[start..i].iter().collect();
            if let Some(rest) = comment.trim().strip_prefix("archetype:") {
                toks.push(Tok::Annotation(rest.trim().to_string()));
            }
        } else if c == '/' && chars.get(i + 1) == Some(&'*') {
            i += 2;
            while i < chars.len() && !(chars[i] == '*' && chars.get(i + 1) == Some(&'/')) {
                i += 1;
            }
            i += 2;
        } else if c == '\'' {
            toks.push(Tok::Str(take_until(&mut i, '\'')?));
        } else if c == '"' || c == '`' {
            toks.push(Tok::Quoted(take_until(&mut i, c)?));
        } else if c == '[' {
            if chars.get(i + 1) == Some(&']') {
                toks.push(Tok::Word("[]".into()));
                i += 2;
            } else {
                toks.push(Tok::Quoted(take_until(&mut i, ']')?));
            }
        } else if c.is_ascii_digit() {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            toks.push(Tok::Num(chars[start..i].iter().collect()));
        } else if c.is_alphanumeric() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_' || chars[i] == '$') {
                i += 1;
            }
            toks.push(Tok::Word(chars[start..i].iter().collect()));
        } else {
            toks.push(Tok::Sym(c));
            i += 1;
        }
    }
    Ok(toks)
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
    statement: usize,
}

type PResult<T> = Result<T, SchemaError>;

const COLUMN_CONSTRAINT_WORDS: [&str; 14] = [
    "PRIMARY", "NOT", "NULL", "UNIQUE", "DEFAULT", "REFERENCES", "CHECK", "CONSTRAINT", "COLLATE",
    "AUTO_INCREMENT", "AUTOINCREMENT", "GENERATED", "AS", "UNSIGNED",
];

impl Parser {
    fn err<T>(&self, message: impl Into<String>) -> PResult<T> {
        Err(SchemaError::Parse { statement: self.statement, message: message.into() })
    }

    fn unexpected<T>(&self, expected: &str) -> PResult<T> {
        match self.peek() {
            Some(t) => self.err(format!("unexpected token `{t}`, expected {expected}")),
            None => self.err(format!("unexpected end of input, expected {expected}")),
        }
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn peek_word(&self) -> Option<String> {
        match self.peek() {
            Some(Tok::Word(w)) => Some(w.to_uppercase()),
            _ => None,
        }
    }

    fn is_word(&self, w: &str) -> bool {
        self.peek_word().as_deref() == Some(w)
    }

    fn eat_word(&mut self, w: &str) -> bool {
        if self.is_word(w) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_word(&mut self, w: &str) -> PResult<()> {
        if self.eat_word(w) {
            Ok(())
        } else {
            self.unexpected(w)
        }
    }

    fn eat_sym(&mut self, c: char) -> bool {
        if self.peek() == Some(&Tok::Sym(c)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_sym(&mut self, c: char) -> PResult<()> {
        if self.eat_sym(c) {
            Ok(())
        } else {
            self.unexpected(&format!("`{c}`"))
        }
    }

    fn ident(&mut self) -> PResult<String> {
        let name = match self.peek() {
            Some(Tok::Word(w)) | Some(Tok::Quoted(w)) => w.clone(),
            _ => return self.unexpected("an identifier"),
        };
        self.pos += 1;
        // schema-qualified names keep the last part
        if self.peek() == Some(&Tok::Sym('.')) {
            self.pos += 1;
            return self.ident();
        }
        Ok(name)
    }

    fn ident_list(&mut self) -> PResult<Vec<String>> {
        self.expect_sym('(')?;
        let mut out = Vec::new();
        loop {
            out.push(self.ident()?);
            while self.eat_word("ASC") || self.eat_word("DESC") {}
            if self.eat_word("COLLATE") {
                self.ident()?;
            }
            if self.eat_sym(',') {
                continue;
            }
            self.expect_sym(')')?;
            return Ok(out);
        }
    }

    fn skip_parens(&mut self) -> PResult<()> {
        self.expect_sym('(')?;
        let mut depth = 1;
        while depth > 0 {
            match self.peek() {
                None => return self.unexpected("`)`"),
                Some(Tok::Sym('(')) => depth += 1,
                Some(Tok::Sym(')')) => depth -= 1,
                _ => {}
            }
            self.pos += 1;
        }
        Ok(())
    }

    fn skip_statement(&mut self) {
        while let Some(t) = self.peek() {
            if *t == Tok::Sym(';') {
                break;
            }
            self.pos += 1;
        }
    }

    /// Tables with a flag telling whether the archetype came from an annotation.
    fn parse(&mut self) -> PResult<Vec<(TableDef, bool)>> {
        let mut tables = Vec::new();
        let mut pending: Option<Archetype> = None;
        loop {
            match self.peek().cloned() {
                None => break,
                Some(Tok::Sym(';')) => self.pos += 1,
                Some(Tok::Annotation(a)) => {
                    self.pos += 1;
                    pending = Some(Archetype::parse(&a).ok_or(SchemaError::Parse {
                        statement: self.statement + 1,
                        message: format!("unknown archetype annotation {a:?}"),
                    })?);
                }
                Some(Tok::Word(w)) if w.eq_ignore_ascii_case("CREATE") => {
                    self.statement += 1;
                    self.pos += 1;
                    let _ = self.eat_word("TEMP") || self.eat_word("TEMPORARY");
                    if self.eat_word("TABLE") {
                        let mut t = self.table()?;
                        let annotated = pending.is_some();
                        if let Some(a) = pending.take() {
                            t.archetype = a;
                        }
                        tables.push((t, annotated));
                    } else if self.is_word("INDEX") || self.is_word("UNIQUE") {
                        self.skip_statement();
                    } else {
                        return self.unexpected("TABLE");
                    }
                }
                Some(t) => {
                    self.statement += 1;
                    return self.err(format!("unsupported statement starting with `{t}`"));
                }
            }
        }
        Ok(tables)
    }

    fn table(&mut self) -> PResult<TableDef> {
        if self.eat_word("IF") {
            self.expect_word("NOT")?;
            self.expect_word("EXISTS")?;
        }
        let name = self.ident()?;
        self.expect_sym('(')?;
        let mut t = TableDef {
            name,
            archetype: Archetype::Entity,
            columns: Vec::new(),
            primary_key: Vec::new(),
            foreign_keys: Vec::new(),
            unique_keys: Vec::new(),
        };
        let mut table_pk: Option<Vec<String>> = None;
        loop {
            if self.eat_word("CONSTRAINT") {
                self.ident()?;
            }
            match self.peek_word().as_deref() {
                Some("PRIMARY") => {
                    self.pos += 1;
                    self.expect_word("KEY")?;
                    if table_pk.is_some() {
                        return self.err(format!("table {} declares two primary keys", t.name));
                    }
                    table_pk = Some(self.ident_list()?);
                    self.conflict_clause()?;
                }
                Some("UNIQUE") => {
                    self.pos += 1;
                    let _ = self.eat_word("KEY") || self.eat_word("INDEX");
                    t.unique_keys.push(self.ident_list()?);
                    self.conflict_clause()?;
                }
                Some("FOREIGN") => {
                    self.pos += 1;
                    self.expect_word("KEY")?;
                    let from = self.ident_list()?;
                    self.expect_word("REFERENCES")?;
                    let (to_table, to_columns) = self.references()?;
                    t.foreign_keys.push(ForeignKeyDef { from_columns: from, to_table, to_columns });
                }
                Some("CHECK") => {
                    self.pos += 1;
                    self.skip_parens()?;
                }
                Some("KEY") | Some("INDEX") => {
                    // MySQL inline index declarations
                    self.pos += 1;
                    if !matches!(self.peek(), Some(Tok::Sym('('))) {
                        self.ident()?;
                    }
                    self.ident_list()?;
                }
                _ => self.column(&mut t)?,
            }
            if self.eat_sym(',') {
                continue;
            }
            self.expect_sym(')')?;
            break;
        }
        // trailing table options such as WITHOUT ROWID or ENGINE=...
        while let Some(tok) = self.peek() {
            if *tok == Tok::Sym(';') || matches!(tok, Tok::Word(w) if w.eq_ignore_ascii_case("CREATE")) || matches!(tok, Tok::Annotation(_)) {
                break;
            }
            self.pos += 1;
        }

        let inline_pk: Vec<String> = t.columns.iter().filter(|c| c.is_primary_key_part).map(|c| c.name.clone()).collect();
        t.primary_key = match (table_pk, inline_pk.len()) {
            (Some(pk), 0) => pk,
            (None, _) => inline_pk,
            (Some(_), _) => return self.err(format!("table {} declares two primary keys", t.name)),
        };
        t.mark_key_columns();
        Ok(t)
    }

    fn conflict_clause(&mut self) -> PResult<()> {
        if self.eat_word("ON") {
            self.expect_word("CONFLICT")?;
            self.ident()?;
        }
        Ok(())
    }

    fn references(&mut self) -> PResult<(String, Vec<String>)> {
        let table = self.ident()?;
        let cols = if matches!(self.peek(), Some(Tok::Sym('('))) { self.ident_list()? } else { Vec::new() };
        loop {
            if self.eat_word("ON") {
                if !(self.eat_word("DELETE") || self.eat_word("UPDATE")) {
                    return self.unexpected("DELETE or UPDATE");
                }
                if self.eat_word("SET") {
                    let _ = self.eat_word("NULL") || self.eat_word("DEFAULT");
                } else if self.eat_word("NO") {
                    self.expect_word("ACTION")?;
                } else if !(self.eat_word("CASCADE") || self.eat_word("RESTRICT")) {
                    return self.unexpected("a referential action");
                }
            } else if self.eat_word("MATCH") {
                self.ident()?;
            } else if self.eat_word("DEFERRABLE") || (self.is_word("NOT") && self.toks.get(self.pos + 1).is_some_and(|t| matches!(t, Tok::Word(w) if w.eq_ignore_ascii_case("DEFERRABLE")))) {
                let _ = self.eat_word("NOT") && self.eat_word("DEFERRABLE");
                if self.eat_word("INITIALLY") {
                    let _ = self.eat_word("DEFERRED") || self.eat_word("IMMEDIATE");
                }
            } else {
                return Ok((table, cols));
            }
        }
    }

    fn column(&mut self, t: &mut TableDef) -> PResult<()> {
        let name = self.ident()?;
        let mut type_words = Vec::new();
        while let Some(w) = self.peek_word() {
            if COLUMN_CONSTRAINT_WORDS.contains(&w.as_str()) {
                break;
            }
            type_words.push(w);
            self.pos += 1;
            if matches!(self.peek(), Some(Tok::Sym('('))) {
                self.skip_parens()?;
            }
        }
        let type_text = type_words.join(" ");
        let Some((sql_type, multi_valued)) = map_type(&type_text) else {
            return self.err(format!("unsupported column type `{type_text}` for {name}"));
        };
        let mut col = ColumnDef { name: name.clone(), sql_type, nullable: true, is_primary_key_part: false, multi_valued };
        loop {
            match self.peek_word().as_deref() {
                Some("CONSTRAINT") => {
                    self.pos += 1;
                    self.ident()?;
                }
                Some("PRIMARY") => {
                    self.pos += 1;
                    self.expect_word("KEY")?;
                    let _ = self.eat_word("ASC") || self.eat_word("DESC");
                    self.conflict_clause()?;
                    self.eat_word("AUTOINCREMENT");
                    col.is_primary_key_part = true;
                }
                Some("NOT") => {
                    self.pos += 1;
                    self.expect_word("NULL")?;
                    self.conflict_clause()?;
                    col.nullable = false;
                }
                Some("NULL") | Some("AUTO_INCREMENT") | Some("AUTOINCREMENT") | Some("UNSIGNED") => self.pos += 1,
                Some("UNIQUE") => {
                    self.pos += 1;
                    self.conflict_clause()?;
                    t.unique_keys.push(vec![name.clone()]);
                }
                Some("DEFAULT") => {
                    self.pos += 1;
                    self.eat_sym('-');
                    self.eat_sym('+');
                    match self.peek() {
                        Some(Tok::Sym('(')) => self.skip_parens()?,
                        Some(Tok::Str(_)) | Some(Tok::Num(_)) | Some(Tok::Word(_)) => self.pos += 1,
                        _ => return self.unexpected("a default value"),
                    }
                }
                Some("REFERENCES") => {
                    self.pos += 1;
                    let (to_table, to_columns) = self.references()?;
                    t.foreign_keys.push(ForeignKeyDef { from_columns: vec![name.clone()], to_table, to_columns });
                }
                Some("CHECK") => {
                    self.pos += 1;
                    self.skip_parens()?;
                }
                Some("COLLATE") => {
                    self.pos += 1;
                    self.ident()?;
                }
                Some("GENERATED") | Some("AS") => {
                    if self.eat_word("GENERATED") {
                        self.expect_word("ALWAYS")?;
                    }
                    self.expect_word("AS")?;
                    self.skip_parens()?;
                    let _ = self.eat_word("STORED") || self.eat_word("VIRTUAL");
                }
                _ => break,
            }
        }
        if !matches!(self.peek(), Some(Tok::Sym(',')) | Some(Tok::Sym(')'))) {
            return self.unexpected("`,` or `)` after column definition");
        }
        t.columns.push(col);
        Ok(())
    }
}

fn map_type(text: &str) -> Option<(SqlType, bool)> {
    let t = text.to_uppercase();
    if t.is_empty() {
        return Some((SqlType::Text, false));
    }
    if t.contains("[]") || t.contains("ARRAY") || t.starts_with("JSON") {
        return Some((SqlType::Text, true));
    }
    let ty = if t.contains("INT") || t.contains("SERIAL") || t.starts_with("BOOL") || t == "YEAR" {
        SqlType::Integer
    } else if t.contains("CHAR") || t.contains("TEXT") || t.contains("CLOB") || t.contains("STRING") || t == "UUID" || t == "BLOB" || t == "ENUM" {
        SqlType::Text
    } else if t.contains("REAL") || t.contains("FLOA") || t.contains("DOUB") || t.contains("DEC") || t.contains("NUMERIC") || t == "MONEY" {
        SqlType::Real
    } else if t.contains("DATE") || t.contains("TIME") {
        SqlType::Date
    } else {
        return None;
    };
    Some((ty, false))
}

const LOOKUP_WORDS: [&str; 15] = [
    "role", "title", "position", "format", "type", "kind", "category", "class", "status", "level",
    "tier", "grade", "medal", "discipline", "sport",
];

fn singular(word: &str) -> String {
    if let Some(stem) = word.strip_suffix("ies") {
        format!("{stem}y")
    } else if word.ends_with("sses") || word.ends_with("uses") {
        word[..word.len() - 2].to_string()
    } else if word.ends_with('s') && !word.ends_with("ss") && !word.ends_with("us") {
        word[..word.len() - 1].to_string()
    } else {
        word.to_string()
    }
}

fn infer_archetype(t: &TableDef) -> Archetype {
    let fk_cols = t.fk_columns();
    if t.primary_key.len() >= 2 && t.primary_key.iter().all(|k| fk_cols.contains(&k.to_lowercase())) {
        return Archetype::Bridge;
    }
    if t.primary_key.iter().any(|k| same_anchor(k, DEFAULT_ANCHOR)) {
        return Archetype::Snapshot;
    }
    if t.primary_key.len() == 1 && t.columns.len() == 2 && t.foreign_keys.is_empty() {
        let label = t.columns.iter().find(|c| !c.is_primary_key_part);
        if let Some(label) = label.filter(|c| c.sql_type == SqlType::Text) {
            let vocab = name_tokens(&t.name).into_iter().chain(name_tokens(&label.name));
            if vocab.map(|w| singular(&w)).any(|w| LOOKUP_WORDS.contains(&w.as_str())) {
                return Archetype::Attribute;
            }
        }
    }
    Archetype::Entity
}

/// Parses CREATE TABLE statements. `CREATE INDEX` is skipped; any other
/// statement is an error naming its 1-based position.
pub fn parse_ddl(ddl: &str) -> Result<RelationalSchema, SchemaError> {
    let toks = tokenize(ddl).map_err(|message| SchemaError::Parse { statement: 0, message })?;
    let mut parser = Parser { toks, pos: 0, statement: 0 };
    let (mut tables, annotated): (Vec<TableDef>, Vec<bool>) = parser.parse()?.into_iter().unzip();
    if tables.is_empty() {
        return Err(SchemaError::Parse { statement: 0, message: "no CREATE TABLE statements found".into() });
    }

    let names: HashMap<String, usize> = tables.iter().enumerate().map(|(i, t)| (t.name.to_lowercase(), i)).collect();
    let mut issues = Vec::new();
    let mut seen = HashSet::new();
    for t in &tables {
        if !seen.insert(t.name.to_lowercase()) {
            issues.push(Violation::new(&t.name, None, &[], "duplicate table name".into()));
        }
    }
    for i in 0..tables.len() {
        for f in 0..tables[i].foreign_keys.len() {
            let fk = &tables[i].foreign_keys[f];
            let Some(&target) = names.get(&fk.to_table.to_lowercase()) else {
                issues.push(Violation::new(
                    &tables[i].name,
                    fk.from_columns.first().map(String::as_str),
                    &[],
                    format!("foreign key references missing table {}", fk.to_table),
                ));
                continue;
            };
            let to_columns = if fk.to_columns.is_empty() { tables[target].primary_key.clone() } else { fk.to_columns.clone() };
            let canonical_table = tables[target].name.clone();
            let canonical_cols: Vec<String> = to_columns
                .iter()
                .map(|c| tables[target].column(c).map(|col| col.name.clone()).unwrap_or_else(|| c.clone()))
                .collect();
            let fk = &mut tables[i].foreign_keys[f];
            fk.to_table = canonical_table;
            fk.to_columns = canonical_cols;
        }
    }
    let schema_probe = RelationalSchema { domain: String::new(), tables: tables.clone() };
    for v in table_issues(&schema_probe) {
        if v.reason.starts_with("foreign key") && !issues.contains(&v) {
            issues.push(v);
        }
    }
    if !issues.is_empty() {
        return Err(SchemaError::Structural(issues));
    }

    for (t, annotated) in tables.iter_mut().zip(annotated) {
        if !annotated {
            t.archetype = infer_archetype(t);
        }
    }
    Ok(RelationalSchema { domain: String::new(), tables })
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn ident() -> impl Strategy<Value = String> {
        "[a-z][a-z0-9_]{0,8}".prop_filter("not a keyword", |s| {
            !matches!(
                s.to_uppercase().as_str(),
                "NOT" | "NULL" | "PRIMARY" | "UNIQUE" | "DEFAULT" | "REFERENCES" | "CHECK" | "CONSTRAINT" | "COLLATE" | "AS" | "KEY" | "INDEX" | "FOREIGN" | "GENERATED"
            )
        })
    }

    fn sql_type() -> impl Strategy<Value = SqlType> {
        prop_oneof![Just(SqlType::Integer), Just(SqlType::Real), Just(SqlType::Text), Just(SqlType::Date)]
    }

    prop_compose! {
        fn table(idx: usize)(
            cols in proptest::collection::btree_set(ident(), 1..6),
            types in proptest::collection::vec(sql_type(), 6),
            nulls in proptest::collection::vec(any::<bool>(), 6),
            pk_len in 1usize..3,
            archetype in prop_oneof![Just(Archetype::Entity), Just(Archetype::Attribute)],
            unique in any::<bool>(),
        ) -> TableDef {
            let cols: Vec<String> = cols.into_iter().collect();
            let columns: Vec<ColumnDef> = cols.iter().enumerate().map(|(i, c)| ColumnDef {
                name: c.clone(), sql_type: types[i], nullable: nulls[i], is_primary_key_part: false, multi_valued: false,
            }).collect();
            let pk: Vec<&str> = cols.iter().take(pk_len.min(cols.len())).map(String::as_str).collect();
            let mut t = TableDef::new(&format!("T{idx}"), archetype, columns, &pk, vec![]);
            if unique && cols.len() > 1 {
                t = t.with_unique(&[cols.last().unwrap()]);
            }
            t
        }
    }

    fn schema() -> impl Strategy<Value = RelationalSchema> {
        (table(0), table(1), table(2), any::<bool>()).prop_map(|(a, b, mut c, link)| {
            if link {
                // c references a's key with freshly named columns
                let from: Vec<String> = a.primary_key.iter().map(|k| format!("ref_{k}")).collect();
                for (f, k) in from.iter().zip(&a.primary_key) {
                    let ty = a.column(k).unwrap().sql_type;
                    if !c.has_column(f) {
                        c.columns.push(ColumnDef::new(f, ty));
                    }
                }
                c.foreign_keys.push(ForeignKeyDef {
                    from_columns: from,
                    to_table: a.name.clone(),
                    to_columns: a.primary_key.clone(),
                });
            }
            RelationalSchema { domain: String::new(), tables: vec![c, b, a] }
        })
    }

    proptest! {
        #[test]
        fn emit_parse_round_trip(s in schema()) {
            let ddl = emit_ddl(&s).unwrap();
            let back = parse_ddl(&ddl).unwrap();
            prop_assert!(s.equivalent(&back), "{ddl}");
            prop_assert_eq!(emit_ddl(&back).unwrap(), ddl);
        }

        #[test]
        fn declarative_findings_survive_more_rows(
            rows in proptest::collection::vec(proptest::collection::vec(proptest::option::of("[ab/(), ]{0,4}"), 3), 0..8),
            extra in proptest::collection::vec(proptest::collection::vec(proptest::option::of("[ab/(), ]{0,4}"), 3), 0..8),
        ) {
            let s = parse_ddl(
                "CREATE TABLE P (id INTEGER PRIMARY KEY, tags JSON, name_or_alias TEXT);\n\
                 CREATE TABLE S (snapshot_id TEXT, pid INTEGER REFERENCES P(id), note TEXT, PRIMARY KEY (snapshot_id, pid));",
            ).unwrap();
            let mk = |rows: &[Vec<Option<String>>]| {
                let mut samples = Samples::new();
                samples.insert("P".into(), TableSample { columns: vec!["id".into(), "tags".into(), "name_or_alias".into()], rows: rows.to_vec() });
                samples.insert("S".into(), TableSample { columns: vec!["snapshot_id".into(), "pid".into(), "note".into()], rows: rows.to_vec() });
                samples
            };
            let declarative = validate_3nf(&s, None);
            let base = validate_3nf(&s, Some(&mk(&rows)));
            let all: Vec<_> = rows.iter().chain(&extra).cloned().collect();
            let more = validate_3nf(&s, Some(&mk(&all)));
            for v in &declarative.atomicity_violations {
                prop_assert!(base.atomicity_violations.iter().any(|b| b.table == v.table && b.column == v.column));
            }
            for b in &base.atomicity_violations {
                prop_assert!(more.atomicity_violations.iter().any(|m| m.table == b.table && m.column == b.column));
            }
            prop_assert_eq!(declarative.structural_violations, more.structural_violations);
        }
    }
}

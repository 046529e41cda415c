//! Building a SQLite database from a schema and loading timelines into it.
//!
//! How raw infobox fields land in tables is described by a [`LoadMapping`],
//! a serializable artifact that can be derived automatically
//! ([`crate::schemagen::derive_mapping`]) or edited by hand. Every field
//! occurrence in a timeline ends up in exactly one [`LoadReport`] bucket:
//! inserted, null-coerced, unmapped or failed.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rusqlite::types::Value as SqlValue;
use rusqlite::{params_from_iter, Connection, ErrorCode, OpenFlags};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::ingest::{self, NullVariants, Payload, Timeline};
use crate::schema::{self, RelationalSchema, SchemaError, SqlType, TableSample};

#[derive(Debug, thiserror::Error)]
pub enum PopulateError {
    #[error("{0} already exists; pass force to overwrite")]
    Conflict(PathBuf),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("sqlite: {0}")]
    Sqlite(#[from] rusqlite::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("no such table {0}")]
    UnknownTable(String),
    #[error("table {table} has no UNIQUE constraint over ({})", .columns.join(", "))]
    NoUniqueKey { table: String, columns: Vec<String> },
    #[error("integrity violation inserting into {table} {row}: {message}")]
    Integrity { table: String, row: String, message: String },
    #[error("duplicate snapshot {snapshot_id} in {table} (entity {entity})")]
    DuplicateSnapshot { table: String, snapshot_id: String, entity: String },
    #[error("mapping: {0}")]
    Mapping(String),
}

pub type Result<T, E = PopulateError> = std::result::Result<T, E>;

pub(crate) fn quote(ident: &str) -> String {
    format!("\"{}\"", ident.replace('"', "\"\""))
}

// ---------------------------------------------------------------------------
// Mapping

/// A lookup table addressed by its id column and its unique label column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LookupTarget {
    pub table: String,
    pub key: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotTarget {
    pub table: String,
    /// Column receiving the snapshot timestamp text.
    pub anchor: String,
    /// Column receiving the subject entity's id.
    pub entity_column: String,
}

/// Where role-like fields go: a bridge row per (snapshot, role, holder).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleTarget {
    pub bridge: String,
    pub anchor_column: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_column: Option<String>,
    pub role: LookupTarget,
    pub role_column: String,
    pub holder: LookupTarget,
    pub holder_column: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "target", rename_all = "snake_case")]
pub enum FieldTarget {
    /// A scalar column of the snapshot table.
    Column { column: String, sql_type: SqlType },
    /// A `"a/b"` value split into two integer columns.
    Composite { columns: [String; 2], separator: String },
    /// The value names whoever holds `title` in this snapshot.
    Role { title: String },
    /// Key is a `{N}` pattern naming holders; the role title comes from the
    /// same index of `title_field`.
    RoleHolder { title_field: String },
    /// Consumed by a matching [`FieldTarget::RoleHolder`].
    RoleTitle,
    Ignore,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadMapping {
    pub entity: LookupTarget,
    pub snapshot: SnapshotTarget,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roles: Option<RoleTarget>,
    /// Flattened field name (or `{N}` pattern) to target.
    pub fields: BTreeMap<String, FieldTarget>,
}

impl LoadMapping {
    /// Exact names win over `{N}` patterns.
    pub fn target(&self, field: &str) -> Option<(&str, &FieldTarget)> {
        if let Some((k, t)) = self.fields.get_key_value(field) {
            return Some((k.as_str(), t));
        }
        self.fields.iter().find_map(|(k, t)| {
            let re = ingest::dynamic_field_regex(k).ok()?;
            re.is_match(field).then_some((k.as_str(), t))
        })
    }

    /// Every table and column named here exists in `schema`.
    pub fn check(&self, schema: &RelationalSchema) -> Result<()> {
        let need = |table: &str, cols: &[&str]| -> Result<()> {
            let t = schema.table(table).ok_or_else(|| PopulateError::Mapping(format!("no table {table}")))?;
            for c in cols {
                if !t.has_column(c) {
                    return Err(PopulateError::Mapping(format!("no column {table}.{c}")));
                }
            }
            Ok(())
        };
        need(&self.entity.table, &[&self.entity.key, &self.entity.label])?;
        need(&self.snapshot.table, &[&self.snapshot.anchor, &self.snapshot.entity_column])?;
        if let Some(r) = &self.roles {
            let mut cols = vec![r.anchor_column.as_str(), r.role_column.as_str(), r.holder_column.as_str()];
            cols.extend(r.entity_column.as_deref());
            need(&r.bridge, &cols)?;
            need(&r.role.table, &[&r.role.key, &r.role.label])?;
            need(&r.holder.table, &[&r.holder.key, &r.holder.label])?;
        }
        for (field, target) in &self.fields {
            match target {
                FieldTarget::Column { column, .. } => need(&self.snapshot.table, &[column])?,
                FieldTarget::Composite { columns, .. } => need(&self.snapshot.table, &[&columns[0], &columns[1]])?,
                FieldTarget::Role { .. } | FieldTarget::RoleHolder { .. } if self.roles.is_none() => {
                    return Err(PopulateError::Mapping(format!("field {field} maps to a role but no role tables are set")))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Database

#[derive(Debug, Clone, Default)]
struct LookupInfo {
    id_column: Option<String>,
    unique_sets: Vec<BTreeSet<String>>,
}

pub struct Database {
    conn: Connection,
    path: Option<PathBuf>,
    lookups: RefCell<HashMap<String, LookupInfo>>,
}

impl std::fmt::Debug for Database {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Database").field("path", &self.path).finish()
    }
}

/// Creates every table of `schema` in a new database file. An existing file
/// is a conflict unless `force` is set, in which case it is replaced.
pub fn create_database(schema: &RelationalSchema, path: &Path, force: bool) -> Result<Database> {
    let ddl = schema::emit_ddl(schema)?;
    if path.exists() {
        if !force {
            return Err(PopulateError::Conflict(path.to_path_buf()));
        }
        std::fs::remove_file(path)?;
        for suffix in ["-wal", "-shm", "-journal"] {
            let side = PathBuf::from(format!("{}{suffix}", path.display()));
            if side.exists() {
                std::fs::remove_file(side)?;
            }
        }
    }
    let conn = Connection::open(path)?;
    let db = Database::wrap(conn, Some(path.to_path_buf()))?;
    db.conn.execute_batch(&ddl)?;
    Ok(db)
}

impl Database {
    fn wrap(conn: Connection, path: Option<PathBuf>) -> Result<Self> {
        conn.pragma_update(None, "foreign_keys", true)?;
        Ok(Self { conn, path, lookups: RefCell::new(HashMap::new()) })
    }

    /// An in-memory database holding `schema`.
    pub fn in_memory(schema: &RelationalSchema) -> Result<Self> {
        let ddl = schema::emit_ddl(schema)?;
        let db = Self::wrap(Connection::open_in_memory()?, None)?;
        db.conn.execute_batch(&ddl)?;
        Ok(db)
    }

    pub fn open(path: &Path) -> Result<Self> {
        let conn = Connection::open_with_flags(path, OpenFlags::SQLITE_OPEN_READ_WRITE)?;
        Self::wrap(conn, Some(path.to_path_buf()))
    }

    pub fn connection(&self) -> &Connection {
        &self.conn
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn table_names(&self) -> Result<Vec<String>> {
        let mut stmt = self
            .conn
            .prepare("SELECT name FROM sqlite_master WHERE type = 'table' AND name NOT LIKE 'sqlite_%' ORDER BY name")?;
        let names = stmt.query_map([], |r| r.get(0))?.collect::<Result<Vec<String>, _>>()?;
        Ok(names)
    }

    pub fn row_count(&self, table: &str) -> Result<usize> {
        let n: i64 = self.conn.query_row(&format!("SELECT COUNT(*) FROM {}", quote(table)), [], |r| r.get(0))?;
        Ok(n as usize)
    }

    /// Up to `limit` rows per table in insertion order, cells rendered as text.
    pub fn sample_rows(&self, schema: &RelationalSchema, limit: usize) -> Result<schema::Samples> {
        let mut out = schema::Samples::new();
        for t in &schema.tables {
            let cols: Vec<String> = t.columns.iter().map(|c| c.name.clone()).collect();
            let sql = format!(
                "SELECT {} FROM {} LIMIT {limit}",
                cols.iter().map(|c| quote(c)).collect::<Vec<_>>().join(", "),
                quote(&t.name)
            );
            let mut stmt = self.conn.prepare(&sql)?;
            let rows = stmt
                .query_map([], |r| {
                    (0..cols.len()).map(|i| Ok(render_cell(&r.get::<_, SqlValue>(i)?))).collect::<rusqlite::Result<Vec<_>>>()
                })?
                .collect::<rusqlite::Result<Vec<_>>>()?;
            out.insert(t.name.clone(), TableSample { columns: cols, rows });
        }
        Ok(out)
    }

    fn lookup_info(&self, table: &str) -> Result<LookupInfo> {
        if let Some(info) = self.lookups.borrow().get(table) {
            return Ok(info.clone());
        }
        let mut stmt = self.conn.prepare(&format!("PRAGMA table_info({})", quote(table)))?;
        let cols: Vec<(String, String, i64)> =
            stmt.query_map([], |r| Ok((r.get(1)?, r.get(2)?, r.get(5)?)))?.collect::<Result<_, _>>()?;
        if cols.is_empty() {
            return Err(PopulateError::UnknownTable(table.to_string()));
        }
        let pk: Vec<&(String, String, i64)> = cols.iter().filter(|c| c.2 > 0).collect();
        let id_column = match pk.as_slice() {
            [only] if only.1.eq_ignore_ascii_case("INTEGER") => Some(only.0.clone()),
            _ => None,
        };
        let mut unique_sets = Vec::new();
        let mut stmt = self.conn.prepare(&format!("PRAGMA index_list({})", quote(table)))?;
        let indexes: Vec<(String, bool)> =
            stmt.query_map([], |r| Ok((r.get(1)?, r.get(2)?)))?.collect::<Result<_, _>>()?;
        for (name, unique) in indexes.into_iter().filter(|i| i.1) {
            let _ = unique;
            let mut stmt = self.conn.prepare(&format!("PRAGMA index_info({})", quote(&name)))?;
            let set: BTreeSet<String> =
                stmt.query_map([], |r| r.get::<_, String>(2))?.map(|c| c.map(|c| c.to_lowercase())).collect::<Result<_, _>>()?;
            unique_sets.push(set);
        }
        let info = LookupInfo { id_column, unique_sets };
        self.lookups.borrow_mut().insert(table.to_string(), info.clone());
        Ok(info)
    }
}

fn render_cell(v: &SqlValue) -> Option<String> {
    match v {
        SqlValue::Null => None,
        SqlValue::Integer(i) => Some(i.to_string()),
        SqlValue::Real(f) => Some(crate::evalharness::render_real(*f)),
        SqlValue::Text(s) => Some(s.clone()),
        SqlValue::Blob(b) => Some(hex::encode(b)),
    }
}

fn is_constraint(e: &rusqlite::Error, extended: i32) -> bool {
    matches!(e, rusqlite::Error::SqliteFailure(f, _) if f.code == ErrorCode::ConstraintViolation && f.extended_code == extended)
}

const UNIQUE: i32 = rusqlite::ffi::SQLITE_CONSTRAINT_UNIQUE;

fn describe_row(cols: &[String], vals: &[SqlValue]) -> String {
    let parts: Vec<String> = cols
        .iter()
        .zip(vals)
        .map(|(c, v)| format!("{c}={}", render_cell(v).unwrap_or_else(|| "NULL".into())))
        .collect();
    format!("({})", parts.join(", "))
}

fn integrity(table: &str, cols: &[String], vals: &[SqlValue], e: rusqlite::Error) -> PopulateError {
    match e {
        rusqlite::Error::SqliteFailure(f, msg) if f.code == ErrorCode::ConstraintViolation => PopulateError::Integrity {
            table: table.to_string(),
            row: describe_row(cols, vals),
            message: msg.unwrap_or_else(|| f.to_string()),
        },
        other => PopulateError::Sqlite(other),
    }
}

/// Returns the id of the row whose natural key equals `natural_key`,
/// inserting it first if absent. A uniqueness conflict on insert falls back to
/// reading the existing row, so exactly one such row exists afterwards.
pub fn upsert_lookup(db: &Database, table: &str, natural_key: &[(&str, SqlValue)]) -> Result<i64> {
    let info = db.lookup_info(table)?;
    let cols: Vec<String> = natural_key.iter().map(|(c, _)| c.to_string()).collect();
    let wanted: BTreeSet<String> = cols.iter().map(|c| c.to_lowercase()).collect();
    if !info.unique_sets.contains(&wanted) {
        return Err(PopulateError::NoUniqueKey { table: table.to_string(), columns: cols });
    }
    let vals: Vec<SqlValue> = natural_key.iter().map(|(_, v)| v.clone()).collect();
    let insert = format!(
        "INSERT INTO {} ({}) VALUES ({})",
        quote(table),
        cols.iter().map(|c| quote(c)).collect::<Vec<_>>().join(", "),
        vec!["?"; cols.len()].join(", ")
    );
    match db.conn.execute(&insert, params_from_iter(vals.iter())) {
        Ok(_) => {
            if info.id_column.is_some() {
                return Ok(db.conn.last_insert_rowid());
            }
        }
        Err(e) if is_constraint(&e, UNIQUE) => {}
        Err(e) => return Err(integrity(table, &cols, &vals, e)),
    }
    let id = info.id_column.as_deref().map(quote).unwrap_or_else(|| "rowid".into());
    let cond = cols.iter().map(|c| format!("{} IS ?", quote(c))).collect::<Vec<_>>().join(" AND ");
    let sql = format!("SELECT {id} FROM {} WHERE {cond}", quote(table));
    Ok(db.conn.query_row(&sql, params_from_iter(vals.iter()), |r| r.get(0))?)
}

/// Rows destined for one table.
#[derive(Debug, Clone, PartialEq)]
pub struct InsertPlan {
    pub table: String,
    pub rows: Vec<BTreeMap<String, SqlValue>>,
    /// With a dedupe key, a row whose key already exists is skipped.
    pub dedupe_key: Option<Vec<String>>,
}

impl InsertPlan {
    /// Every row covers every non-nullable column of the table.
    pub fn check(&self, schema: &RelationalSchema) -> Result<()> {
        let t = schema.table(&self.table).ok_or_else(|| PopulateError::UnknownTable(self.table.clone()))?;
        for row in &self.rows {
            for c in t.columns.iter().filter(|c| !c.nullable) {
                if !row.iter().any(|(k, v)| k.eq_ignore_ascii_case(&c.name) && *v != SqlValue::Null) {
                    // an INTEGER PRIMARY KEY is filled in by the database
                    let auto = t.primary_key.len() == 1 && c.is_primary_key_part && c.sql_type == SqlType::Integer;
                    if !auto {
                        return Err(PopulateError::Integrity {
                            table: self.table.clone(),
                            row: describe_row(&row.keys().cloned().collect::<Vec<_>>(), &row.values().cloned().collect::<Vec<_>>()),
                            message: format!("missing value for NOT NULL column {}", c.name),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Returns the number of rows actually written.
    fn execute(&self, db: &Database) -> Result<usize> {
        let mut written = 0;
        for row in &self.rows {
            let cols: Vec<String> = row.keys().cloned().collect();
            let vals: Vec<SqlValue> = row.values().cloned().collect();
            let verb = if self.dedupe_key.is_some() { "INSERT OR IGNORE" } else { "INSERT" };
            let sql = format!(
                "{verb} INTO {} ({}) VALUES ({})",
                quote(&self.table),
                cols.iter().map(|c| quote(c)).collect::<Vec<_>>().join(", "),
                vec!["?"; cols.len()].join(", ")
            );
            written += db.conn.execute(&sql, params_from_iter(vals.iter())).map_err(|e| integrity(&self.table, &cols, &vals, e))?;
        }
        Ok(written)
    }
}

// ---------------------------------------------------------------------------
// Loading

#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Skip snapshots and bridge rows that are already present.
    pub dedupe: bool,
    pub nulls: NullVariants,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { dedupe: true, nulls: NullVariants::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldFailure {
    pub snapshot_id: String,
    pub field: String,
    pub reason: String,
}

/// `inserted + null_coerced + unmapped + failed == total_fields`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub entity: String,
    pub rows_inserted: BTreeMap<String, usize>,
    pub total_fields: usize,
    pub inserted: usize,
    pub null_coerced: usize,
    pub unmapped: usize,
    pub failed: usize,
    pub unmapped_fields: Vec<String>,
    pub failures: Vec<FieldFailure>,
    pub skipped_snapshots: usize,
}

impl LoadReport {
    pub fn is_balanced(&self) -> bool {
        self.inserted + self.null_coerced + self.unmapped + self.failed == self.total_fields
    }

    fn wrote(&mut self, table: &str, n: usize) {
        *self.rows_inserted.entry(table.to_string()).or_insert(0) += n;
    }
}

enum Outcome {
    Inserted,
    Null,
    Unmapped,
    Failed(String),
}

fn clean_scalar(value: &Value, ty: SqlType, nulls: &NullVariants) -> std::result::Result<Option<SqlValue>, String> {
    let text = match value {
        Value::Null => return Ok(None),
        Value::Array(_) | Value::Object(_) => return Err("list value for a single-valued column".into()),
        Value::Bool(b) => return Ok(Some(if ty == SqlType::Text { SqlValue::Text(b.to_string()) } else { SqlValue::Integer(*b as i64) })),
        Value::Number(n) => match ty {
            SqlType::Integer => return Ok(n.as_i64().or_else(|| n.as_f64().map(|f| f.trunc() as i64)).map(SqlValue::Integer)),
            SqlType::Real => return Ok(n.as_f64().map(SqlValue::Real)),
            _ => n.to_string(),
        },
        Value::String(s) => s.clone(),
    };
    if nulls.is_null(&text) {
        return Ok(None);
    }
    let cleaned = match ty {
        SqlType::Integer => ingest::safe_int(&text),
        SqlType::Real => ingest::safe_real(&text),
        SqlType::Date => ingest::normalize_date(&text),
        SqlType::Text => nulls.normalize(&text),
    };
    Ok(match cleaned.value {
        Payload::Integer(i) => Some(SqlValue::Integer(i)),
        Payload::Real(f) => Some(SqlValue::Real(f)),
        Payload::Text(s) => Some(SqlValue::Text(s)),
        Payload::Date { date, .. } => Some(SqlValue::Text(date.format("%Y-%m-%d").to_string())),
        Payload::Null | Payload::Pair(..) => None,
    })
}

/// Holder names carried by a role field: one string, or a list of them.
fn holders(value: &Value, nulls: &NullVariants) -> std::result::Result<Vec<String>, String> {
    let one = |v: &Value| -> std::result::Result<Option<String>, String> {
        match v {
            Value::Null => Ok(None),
            Value::String(s) => Ok(nulls.normalize(s).as_text().map(str::to_string)),
            Value::Number(n) => Ok(Some(n.to_string())),
            _ => Err("role value is not text".into()),
        }
    };
    match value {
        Value::Array(items) => {
            let mut out = Vec::new();
            for v in items {
                out.extend(one(v)?);
            }
            Ok(out)
        }
        v => Ok(one(v)?.into_iter().collect()),
    }
}

/// Loads one timeline. Runs in a transaction: an error leaves the database
/// as it was.
pub fn populate_timeline(
    db: &Database,
    schema: &RelationalSchema,
    timeline: &Timeline,
    mapping: &LoadMapping,
    opts: &LoadOptions,
) -> Result<LoadReport> {
    mapping.check(schema)?;
    let tx = db.conn.unchecked_transaction()?;
    let mut report = LoadReport { entity: timeline.entity_name.clone(), ..Default::default() };
    let mut unmapped = BTreeSet::new();

    let before = db.row_count(&mapping.entity.table)?;
    let entity_id = upsert_lookup(db, &mapping.entity.table, &[(&mapping.entity.label, SqlValue::Text(timeline.entity_name.clone()))])?;
    report.wrote(&mapping.entity.table, db.row_count(&mapping.entity.table)? - before);

    for snap in &timeline.snapshots {
        let snapshot_id = snap.timestamp.as_snapshot_id();
        let fields = snap.flattened();
        let mut row: BTreeMap<String, SqlValue> = BTreeMap::new();
        row.insert(mapping.snapshot.anchor.clone(), SqlValue::Text(snapshot_id.clone()));
        row.insert(mapping.snapshot.entity_column.clone(), SqlValue::Integer(entity_id));
        let mut roles: Vec<(String, String)> = Vec::new();
        let mut outcomes: Vec<(String, Outcome)> = Vec::new();
        // holder outcomes for dynamic role titles, keyed by index
        let mut dynamic_titles: HashMap<String, Outcome> = HashMap::new();

        for (field, value) in &fields {
            let outcome = match mapping.target(field) {
                None | Some((_, FieldTarget::Ignore)) => Outcome::Unmapped,
                Some((_, FieldTarget::RoleTitle)) => continue,
                Some((_, FieldTarget::Column { column, sql_type })) => match clean_scalar(value, *sql_type, &opts.nulls) {
                    Ok(Some(v)) => {
                        row.insert(column.clone(), v);
                        Outcome::Inserted
                    }
                    Ok(None) => Outcome::Null,
                    Err(e) => Outcome::Failed(e),
                },
                Some((_, FieldTarget::Composite { columns, separator })) => match value {
                    Value::Null => Outcome::Null,
                    Value::String(s) if opts.nulls.is_null(s) => Outcome::Null,
                    Value::String(s) => match ingest::parse_composite(s, separator) {
                        Ok(cv) => match cv.value {
                            Payload::Pair(a, b) if a.is_some() || b.is_some() => {
                                for (col, v) in columns.iter().zip([a, b]) {
                                    if let Some(v) = v {
                                        row.insert(col.clone(), SqlValue::Integer(v));
                                    }
                                }
                                Outcome::Inserted
                            }
                            _ => Outcome::Null,
                        },
                        Err(e) => Outcome::Failed(e.to_string()),
                    },
                    _ => Outcome::Failed("composite value is not text".into()),
                },
                Some((_, FieldTarget::Role { title })) => match holders(value, &opts.nulls) {
                    Ok(hs) if hs.is_empty() => Outcome::Null,
                    Ok(hs) => {
                        roles.extend(hs.into_iter().map(|h| (title.clone(), h)));
                        Outcome::Inserted
                    }
                    Err(e) => Outcome::Failed(e),
                },
                Some((pattern, FieldTarget::RoleHolder { title_field })) => {
                    let re = ingest::dynamic_field_regex(pattern).map_err(|e| PopulateError::Mapping(e.to_string()))?;
                    let idx = re.captures(field).and_then(|c| c.get(1)).map(|m| m.as_str().to_string()).unwrap_or_default();
                    let title_key = title_field.replace("{N}", &idx);
                    let title = fields.iter().find(|(k, _)| *k == title_key).and_then(|(_, v)| v.as_str()).map(|s| opts.nulls.normalize(s));
                    let outcome = match (holders(value, &opts.nulls), title.as_ref().and_then(|t| t.as_text())) {
                        (Err(e), _) => Outcome::Failed(e),
                        (Ok(hs), _) if hs.is_empty() => Outcome::Null,
                        (Ok(_), None) => Outcome::Failed(format!("no role title in {title_key}")),
                        (Ok(hs), Some(t)) => {
                            roles.extend(hs.into_iter().map(|h| (t.to_string(), h)));
                            Outcome::Inserted
                        }
                    };
                    let mirrored = match &outcome {
                        Outcome::Inserted => Outcome::Inserted,
                        Outcome::Null => Outcome::Null,
                        Outcome::Unmapped => Outcome::Unmapped,
                        Outcome::Failed(e) => Outcome::Failed(e.clone()),
                    };
                    dynamic_titles.insert(title_key, mirrored);
                    outcome
                }
            };
            outcomes.push((field.clone(), outcome));
        }
        // role titles share the fate of their holder; orphan titles are unmapped
        for (field, _) in &fields {
            if let Some((_, FieldTarget::RoleTitle)) = mapping.target(field) {
                let o = dynamic_titles.remove(field).unwrap_or(Outcome::Unmapped);
                outcomes.push((field.clone(), o));
            }
        }

        for (field, outcome) in outcomes {
            report.total_fields += 1;
            match outcome {
                Outcome::Inserted => report.inserted += 1,
                Outcome::Null => report.null_coerced += 1,
                Outcome::Unmapped => {
                    report.unmapped += 1;
                    unmapped.insert(field);
                }
                Outcome::Failed(reason) => {
                    report.failed += 1;
                    report.failures.push(FieldFailure { snapshot_id: snapshot_id.clone(), field, reason });
                }
            }
        }

        let plan = InsertPlan { table: mapping.snapshot.table.clone(), rows: vec![row], dedupe_key: None };
        plan.check(schema)?;
        let cols: Vec<String> = plan.rows[0].keys().cloned().collect();
        let vals: Vec<SqlValue> = plan.rows[0].values().cloned().collect();
        match plan.execute(db) {
            Ok(n) => report.wrote(&plan.table, n),
            Err(PopulateError::Integrity { .. }) => {
                let sql = format!(
                    "SELECT {} FROM {} WHERE {} = ?",
                    quote(&mapping.snapshot.entity_column),
                    quote(&mapping.snapshot.table),
                    quote(&mapping.snapshot.anchor)
                );
                let mut stmt = db.conn.prepare(&sql)?;
                let owners: Vec<SqlValue> =
                    stmt.query_map([&snapshot_id], |r| r.get(0))?.collect::<Result<_, _>>()?;
                if owners.is_empty() {
                    // not a key clash: re-run to surface the original constraint error
                    let err = db
                        .conn
                        .execute(
                            &format!(
                                "INSERT INTO {} ({}) VALUES ({})",
                                quote(&plan.table),
                                cols.iter().map(|c| quote(c)).collect::<Vec<_>>().join(", "),
                                vec!["?"; cols.len()].join(", ")
                            ),
                            params_from_iter(vals.iter()),
                        )
                        .err();
                    return Err(match err {
                        Some(e) => integrity(&plan.table, &cols, &vals, e),
                        None => PopulateError::Integrity { table: plan.table.clone(), row: describe_row(&cols, &vals), message: "insert failed".into() },
                    });
                }
                if !(opts.dedupe && owners.contains(&SqlValue::Integer(entity_id))) {
                    return Err(PopulateError::DuplicateSnapshot {
                        table: plan.table.clone(),
                        snapshot_id,
                        entity: timeline.entity_name.clone(),
                    });
                }
                report.skipped_snapshots += 1;
            }
            Err(e) => return Err(e),
        }

        if let Some(rt) = &mapping.roles {
            let mut seen = BTreeSet::new();
            let mut bridge_rows = Vec::new();
            for (title, holder) in roles {
                if !seen.insert((title.clone(), holder.clone())) {
                    continue;
                }
                let role_before = db.row_count(&rt.role.table)?;
                let role_id = upsert_lookup(db, &rt.role.table, &[(&rt.role.label, SqlValue::Text(title))])?;
                report.wrote(&rt.role.table, db.row_count(&rt.role.table)? - role_before);
                let holder_before = db.row_count(&rt.holder.table)?;
                let holder_id = upsert_lookup(db, &rt.holder.table, &[(&rt.holder.label, SqlValue::Text(holder))])?;
                report.wrote(&rt.holder.table, db.row_count(&rt.holder.table)? - holder_before);
                let mut r = BTreeMap::new();
                r.insert(rt.anchor_column.clone(), SqlValue::Text(snapshot_id.clone()));
                if let Some(ec) = &rt.entity_column {
                    r.insert(ec.clone(), SqlValue::Integer(entity_id));
                }
                r.insert(rt.role_column.clone(), SqlValue::Integer(role_id));
                r.insert(rt.holder_column.clone(), SqlValue::Integer(holder_id));
                bridge_rows.push(r);
            }
            let plan = InsertPlan {
                table: rt.bridge.clone(),
                rows: bridge_rows,
                dedupe_key: opts.dedupe.then(|| schema.table(&rt.bridge).map(|t| t.primary_key.clone()).unwrap_or_default()),
            };
            plan.check(schema)?;
            match plan.execute(db) {
                Ok(n) => report.wrote(&plan.table, n),
                Err(PopulateError::Integrity { message, row, table }) if message.contains("UNIQUE") => {
                    return Err(PopulateError::DuplicateSnapshot { table, snapshot_id: format!("{snapshot_id} {row}"), entity: timeline.entity_name.clone() })
                }
                Err(e) => return Err(e),
            }
        }
    }
    report.unmapped_fields = unmapped.into_iter().collect();
    tx.commit()?;
    Ok(report)
}

/// One foreign-key edge with rows whose parent is missing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrityViolation {
    pub table: String,
    pub columns: Vec<String>,
    pub referenced_table: String,
    pub referenced_columns: Vec<String>,
    pub orphan_rows: usize,
}

/// Anti-join over every foreign key in `schema`. Empty means consistent.
pub fn verify_integrity(db: &Database, schema: &RelationalSchema) -> Result<Vec<IntegrityViolation>> {
    let mut out = Vec::new();
    for t in &schema.tables {
        for fk in &t.foreign_keys {
            let not_null = fk.from_columns.iter().map(|c| format!("c.{} IS NOT NULL", quote(c))).collect::<Vec<_>>().join(" AND ");
            let join = fk
                .from_columns
                .iter()
                .zip(&fk.to_columns)
                .map(|(f, to)| format!("p.{} = c.{}", quote(to), quote(f)))
                .collect::<Vec<_>>()
                .join(" AND ");
            let sql = format!(
                "SELECT COUNT(*) FROM {} AS c WHERE {not_null} AND NOT EXISTS (SELECT 1 FROM {} AS p WHERE {join})",
                quote(&t.name),
                quote(&fk.to_table)
            );
            let n: i64 = db.conn.query_row(&sql, [], |r| r.get(0))?;
            if n > 0 {
                out.push(IntegrityViolation {
                    table: t.name.clone(),
                    columns: fk.from_columns.clone(),
                    referenced_table: fk.to_table.clone(),
                    referenced_columns: fk.to_columns.clone(),
                    orphan_rows: n as usize,
                });
            }
        }
    }
    Ok(out)
}

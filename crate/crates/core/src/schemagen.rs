//! Producing a schema for a domain: by asking a model, or by fixed rules.
//!
//! The rule-based generator always yields the same layout: one entity table,
//! one snapshot table keyed by `(snapshot_id, entity_id)`, and, when any
//! field holds people or other named holders, a role lookup, a holder table
//! and a bridge tying them to snapshots.

use std::collections::{BTreeMap, HashSet};

use serde_json::Value;

use crate::ingest::{self, Timeline};
use crate::llmclient::{CompletionRequest, LlmClient, LlmError};
use crate::populate::{FieldTarget, LoadMapping, LookupTarget, RoleTarget, SnapshotTarget};
use crate::schema::{
    self, Archetype, ColumnDef, ForeignKeyDef, NormalizationReport, RelationalSchema, SchemaError, SqlType, TableDef,
    DEFAULT_ANCHOR,
};

#[derive(Debug, thiserror::Error)]
pub enum SchemaGenError {
    #[error("schema prompts take 2 or 3 example timelines, got {0}")]
    ExampleCount(usize),
    #[error("example timelines mix domains: {0:?}")]
    MixedDomains(Vec<String>),
    #[error("no CREATE TABLE statement in model response")]
    NoDdl { response: String },
    #[error("model DDL does not parse: {source}")]
    Parse { source: SchemaError, response: String },
    #[error("no usable fields: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("cannot derive a load mapping: {0}")]
    Mapping(String),
}

const INSTRUCTION: &str = "Generate a 3NF schema where: (a) all attributes are atomic (no multi-valued fields), \
(b) all non-key attributes are fully functionally dependent on the primary key, and \
(c) no transitive dependencies exist between non-key attributes.";

const ARCHETYPES: &str = "\
Organize the tables into four archetypes:
- Entity tables: core entities with unique identifiers (for example the subject itself and the people who hold roles).
- Attribute tables: domain-specific lookup tables (for example role titles or match formats).
- Snapshot tables: temporal data keyed by snapshot_id, the snapshot timestamp, holding the time-varying attributes.
- Bridge tables: many-to-many relationships linking entities, attributes and snapshots.";

const OUTPUT_FORMAT: &str = "\
Return only SQLite CREATE TABLE statements inside one ```sql code block. Declare every primary key and \
foreign key. Use snapshot_id TEXT as the temporal anchor column. Prefer semantic table and column names.";

/// A deterministic prompt asking for a Third Normal Form schema covering the
/// examples.
pub fn build_schema_prompt(examples: &[Timeline], domain: &str) -> Result<String, SchemaGenError> {
    if !(2..=3).contains(&examples.len()) {
        return Err(SchemaGenError::ExampleCount(examples.len()));
    }
    let mut domains: Vec<String> = examples.iter().map(|t| t.domain.clone()).collect();
    domains.dedup();
    if domains.len() > 1 || domains[0] != domain {
        domains.push(domain.to_string());
        return Err(SchemaGenError::MixedDomains(domains));
    }
    let mut out = format!(
        "You are designing a relational database for the \"{domain}\" domain.\n\
         Below are {} JSON timelines of infobox snapshots from this domain. Each snapshot is one timestamped \
         sampling of an entity's infobox.\n\
         Design a Third Normal Form (3NF) relational schema that can hold every timeline of this domain.\n\n\
         {INSTRUCTION}\n\n{ARCHETYPES}\n\n{OUTPUT_FORMAT}\n",
        examples.len()
    );
    for (i, t) in examples.iter().enumerate() {
        out.push_str(&format!("\n### Example {} ({})\n```json\n{}```\n", i + 1, t.entity_name, ingest::serialize_timeline(t)));
    }
    Ok(out)
}

/// DDL candidates in preference order: fenced blocks that hold a
/// `CREATE TABLE`, then the bare statements found in the text.
pub fn extract_ddl_candidates(response: &str) -> Vec<String> {
    let fence = regex!(r"(?s)```[A-Za-z0-9_-]*[ \t]*\r?\n(.*?)```");
    let create = regex!(r"(?i)\bCREATE\s+TABLE\b");
    let mut out: Vec<String> = fence
        .captures_iter(response)
        .map(|c| c[1].to_string())
        .filter(|b| create.is_match(b))
        .collect();
    let mut bare = Vec::new();
    for m in create.find_iter(response) {
        if let Some(stmt) = balanced_statement(&response[m.start()..]) {
            bare.push(stmt);
        }
    }
    if !bare.is_empty() {
        let joined = bare.join(";\n\n") + ";\n";
        if !out.contains(&joined) {
            out.push(joined);
        }
    }
    out
}

/// Text from the start up to the parenthesis closing the first one opened.
fn balanced_statement(text: &str) -> Option<String> {
    let mut depth = 0usize;
    let mut quote: Option<char> = None;
    for (i, c) in text.char_indices() {
        match quote {
            Some(q) if c == q => quote = None,
            Some(_) => {}
            None => match c {
                '\'' | '"' | '`' => quote = Some(c),
                '(' => depth += 1,
                ')' => {
                    depth = depth.checked_sub(1)?;
                    if depth == 0 {
                        return Some(text[..=i].to_string());
                    }
                }
                _ => {}
            },
        }
    }
    None
}

#[derive(Debug, Clone)]
pub struct GeneratedSchema {
    pub schema: RelationalSchema,
    pub report: NormalizationReport,
    pub ddl: String,
    pub raw_response: String,
}

/// The first candidate that parses wins; if none does, the error of the
/// first candidate is returned.
pub fn schema_from_response(response: &str, domain: &str) -> Result<GeneratedSchema, SchemaGenError> {
    let candidates = extract_ddl_candidates(response);
    if candidates.is_empty() {
        return Err(SchemaGenError::NoDdl { response: response.to_string() });
    }
    let mut first_err = None;
    for ddl in candidates {
        match schema::parse_ddl(&ddl) {
            Ok(mut s) => {
                s.domain = domain.to_string();
                let report = schema::validate_3nf(&s, None);
                return Ok(GeneratedSchema { schema: s, report, ddl, raw_response: response.to_string() });
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    Err(SchemaGenError::Parse { source: first_err.expect("at least one candidate"), response: response.to_string() })
}

pub fn generate_schema_llm(
    prompt: &str,
    client: &LlmClient,
    model_id: &str,
    domain: &str,
) -> Result<GeneratedSchema, SchemaGenError> {
    let reply = client.complete(&CompletionRequest::new(model_id, prompt, ""))?;
    schema_from_response(&reply.text, domain)
}

// ---------------------------------------------------------------------------
// Rule-based generation

#[derive(Debug, Clone, PartialEq)]
pub enum FieldKind {
    Integer,
    Real,
    Date,
    /// Holder names; each distinct field becomes one role title.
    Role,
    Text,
    /// Two integers in one value, like `"110/95"`.
    Composite { separator: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldProfile {
    pub name: String,
    pub kind: FieldKind,
}

const MAJORITY: f64 = 0.75;

/// Kind of every flattened field, in order of first appearance. Fields whose
/// values are all null are left out.
pub fn profile_fields(timelines: &[Timeline]) -> Vec<FieldProfile> {
    let nulls = ingest::NullVariants::default();
    let mut order: Vec<String> = Vec::new();
    let mut values: BTreeMap<String, Vec<Value>> = BTreeMap::new();
    for t in timelines {
        for s in &t.snapshots {
            for (k, v) in s.flattened() {
                let live = match &v {
                    Value::Null => false,
                    Value::String(s) => !nulls.is_null(s),
                    Value::Array(a) => !a.is_empty(),
                    _ => true,
                };
                if !values.contains_key(&k) {
                    order.push(k.clone());
                }
                let slot = values.entry(k).or_default();
                if live {
                    slot.push(v);
                }
            }
        }
    }
    order
        .into_iter()
        .filter_map(|name| {
            let vals = &values[&name];
            classify(&name, vals).map(|kind| FieldProfile { name, kind })
        })
        .collect()
}

fn classify(name: &str, vals: &[Value]) -> Option<FieldKind> {
    if vals.is_empty() {
        return None;
    }
    let n = vals.len() as f64;
    let texts: Vec<String> = vals
        .iter()
        .filter_map(|v| match v {
            Value::String(s) => Some(s.trim().to_string()),
            Value::Number(x) => Some(x.to_string()),
            _ => None,
        })
        .collect();
    if vals.iter().all(|v| matches!(v, Value::Array(_))) {
        let all_text = vals.iter().flat_map(|v| v.as_array().unwrap()).all(|x| x.is_string());
        return all_text.then_some(FieldKind::Role);
    }
    let share = |f: &dyn Fn(&str) -> bool| texts.iter().filter(|t| f(t)).count() as f64 / n;

    let composite = |t: &str| {
        ingest::parse_composite(t, "/")
            .map(|c| matches!(c.value, ingest::Payload::Pair(a, b) if a.is_some() || b.is_some()))
            .unwrap_or(false)
    };
    if share(&composite) >= MAJORITY && (name.contains('/') || texts.iter().any(|t| t.contains('/'))) {
        return Some(FieldKind::Composite { separator: "/".into() });
    }
    let parsed: Vec<f64> = texts
        .iter()
        .filter_map(|t| match ingest::safe_real(t).value {
            ingest::Payload::Real(f) => Some(f),
            ingest::Payload::Integer(i) => Some(i as f64),
            _ => None,
        })
        .collect();
    if parsed.len() as f64 / n >= MAJORITY {
        return Some(if parsed.iter().all(|f| f.fract() == 0.0) { FieldKind::Integer } else { FieldKind::Real });
    }
    if share(&|t| !ingest::normalize_date(t).is_null()) >= MAJORITY {
        return Some(FieldKind::Date);
    }
    if texts.len() as f64 / n >= MAJORITY && texts.iter().all(|t| !t.chars().any(|c| c.is_ascii_digit())) {
        return Some(FieldKind::Role);
    }
    (!texts.is_empty()).then_some(FieldKind::Text)
}


/// A lower-case identifier for a field. Words that suggest a packed value
/// (`and`, `list`, ...) are dropped so names never read as multi-valued.
pub fn column_name(field: &str) -> String {
    let mut s: String = field.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' }).collect();
    s = s.split('_').filter(|p| !p.is_empty()).collect::<Vec<_>>().join("_");
    let words: Vec<&str> = s.split('_').collect();
    if words.len() > 1 {
        let kept: Vec<&str> = words.iter().copied().filter(|w| !schema::NAME_FLAGS.contains(w)).collect();
        s = if kept.is_empty() { "field".into() } else { kept.join("_") };
    }
    if s.is_empty() {
        s = "field".into();
    }
    if s.starts_with(|c: char| c.is_ascii_digit()) {
        s = format!("n_{s}");
    }
    if schema::is_keyword(&s) {
        s.push_str("_value");
    }
    s
}

fn unique_name(base: String, used: &mut HashSet<String>) -> String {
    let mut name = base.clone();
    let mut i = 2;
    while !used.insert(name.clone()) {
        name = format!("{base}_{i}");
        i += 1;
    }
    name
}

fn pascal(domain: &str) -> String {
    let mut out: String = domain
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|p| !p.is_empty())
        .map(|p| {
            let mut cs = p.chars();
            let first = cs.next().unwrap().to_ascii_uppercase();
            std::iter::once(first).chain(cs.map(|c| c.to_ascii_lowercase())).collect::<String>()
        })
        .collect();
    if out.is_empty() || out.starts_with(|c: char| c.is_ascii_digit()) {
        out = format!("Entity{out}");
    }
    if !out.ends_with('s') {
        out.push('s');
    }
    out
}

/// The role title a field name stands for: `prime_minister` reads
/// `prime minister`.
pub fn role_title(field: &str) -> String {
    field.replace(['_', '.'], " ").split_whitespace().collect::<Vec<_>>().join(" ")
}

const SNAPSHOTS: &str = "Snapshots";
const HOLDERS: &str = "Holders";
const ROLES: &str = "Roles";
const BRIDGE: &str = "SnapshotRoles";

/// The rule-based schema together with how each field lands in it.
pub fn fallback_plan(examples: &[Timeline], domain: &str) -> Result<(RelationalSchema, LoadMapping), SchemaGenError> {
    if examples.is_empty() {
        return Err(SchemaGenError::Degenerate("no timelines".into()));
    }
    let profiles = profile_fields(examples);
    if profiles.is_empty() {
        return Err(SchemaGenError::Degenerate(format!("no non-null fields in the {domain} timelines")));
    }
    let entity_table = pascal(domain);
    let mut used: HashSet<String> = ["snapshot_id", "entity_id"].iter().map(|s| s.to_string()).collect();
    let mut columns = vec![ColumnDef::new("snapshot_id", SqlType::Text), ColumnDef::new("entity_id", SqlType::Integer)];
    let mut fields = BTreeMap::new();
    let mut has_roles = false;
    for p in &profiles {
        let scalar = |ty: SqlType, used: &mut HashSet<String>, columns: &mut Vec<ColumnDef>| {
            let c = unique_name(column_name(&p.name), used);
            columns.push(ColumnDef::new(&c, ty));
            FieldTarget::Column { column: c, sql_type: ty }
        };
        let target = match &p.kind {
            FieldKind::Integer => scalar(SqlType::Integer, &mut used, &mut columns),
            FieldKind::Real => scalar(SqlType::Real, &mut used, &mut columns),
            FieldKind::Date => scalar(SqlType::Date, &mut used, &mut columns),
            FieldKind::Text => scalar(SqlType::Text, &mut used, &mut columns),
            FieldKind::Role => {
                has_roles = true;
                FieldTarget::Role { title: role_title(&p.name) }
            }
            FieldKind::Composite { separator } => {
                let halves: Vec<&str> = p.name.split('/').filter(|h| !h.trim().is_empty()).collect();
                let [a, b] = match halves.as_slice() {
                    [a, b] => [column_name(a), column_name(b)],
                    _ => {
                        let base = column_name(&p.name);
                        [format!("{base}_first"), format!("{base}_second")]
                    }
                };
                let a = unique_name(a, &mut used);
                let b = unique_name(b, &mut used);
                columns.push(ColumnDef::new(&a, SqlType::Integer));
                columns.push(ColumnDef::new(&b, SqlType::Integer));
                FieldTarget::Composite { columns: [a, b], separator: separator.clone() }
            }
        };
        fields.insert(p.name.clone(), target);
    }

    let mut tables = vec![
        TableDef::new(
            &entity_table,
            Archetype::Entity,
            vec![ColumnDef::new("entity_id", SqlType::Integer), ColumnDef::new("entity_name", SqlType::Text).not_null()],
            &["entity_id"],
            vec![],
        )
        .with_unique(&["entity_name"]),
        TableDef::new(
            SNAPSHOTS,
            Archetype::Snapshot,
            columns,
            &["snapshot_id", "entity_id"],
            vec![ForeignKeyDef::new(&["entity_id"], &entity_table, &["entity_id"])],
        ),
    ];
    let mut mapping = LoadMapping {
        entity: LookupTarget { table: entity_table.clone(), key: "entity_id".into(), label: "entity_name".into() },
        snapshot: SnapshotTarget { table: SNAPSHOTS.into(), anchor: "snapshot_id".into(), entity_column: "entity_id".into() },
        roles: None,
        fields,
    };
    if has_roles {
        tables.push(
            TableDef::new(
                HOLDERS,
                Archetype::Entity,
                vec![ColumnDef::new("holder_id", SqlType::Integer), ColumnDef::new("holder_name", SqlType::Text).not_null()],
                &["holder_id"],
                vec![],
            )
            .with_unique(&["holder_name"]),
        );
        tables.push(
            TableDef::new(
                ROLES,
                Archetype::Attribute,
                vec![ColumnDef::new("role_id", SqlType::Integer), ColumnDef::new("role_title", SqlType::Text).not_null()],
                &["role_id"],
                vec![],
            )
            .with_unique(&["role_title"]),
        );
        tables.push(TableDef::new(
            BRIDGE,
            Archetype::Bridge,
            vec![
                ColumnDef::new("snapshot_id", SqlType::Text),
                ColumnDef::new("entity_id", SqlType::Integer),
                ColumnDef::new("role_id", SqlType::Integer),
                ColumnDef::new("holder_id", SqlType::Integer),
            ],
            &["snapshot_id", "entity_id", "role_id", "holder_id"],
            vec![
                ForeignKeyDef::new(&["snapshot_id", "entity_id"], SNAPSHOTS, &["snapshot_id", "entity_id"]),
                ForeignKeyDef::new(&["role_id"], ROLES, &["role_id"]),
                ForeignKeyDef::new(&["holder_id"], HOLDERS, &["holder_id"]),
            ],
        ));
        mapping.roles = Some(RoleTarget {
            bridge: BRIDGE.into(),
            anchor_column: "snapshot_id".into(),
            entity_column: Some("entity_id".into()),
            role: LookupTarget { table: ROLES.into(), key: "role_id".into(), label: "role_title".into() },
            role_column: "role_id".into(),
            holder: LookupTarget { table: HOLDERS.into(), key: "holder_id".into(), label: "holder_name".into() },
            holder_column: "holder_id".into(),
        });
    }
    let schema = RelationalSchema { domain: domain.to_string(), tables };
    let issues = schema.structural_issues();
    debug_assert!(issues.is_empty(), "{issues:?}");
    Ok((schema, mapping))
}

pub fn generate_schema_fallback(examples: &[Timeline], domain: &str) -> Result<RelationalSchema, SchemaGenError> {
    Ok(fallback_plan(examples, domain)?.0)
}

/// How `timelines` load into `schema`. The rule-based schema gets its own
/// plan back; any other schema is matched by table archetypes and sanitized
/// column names. Fields without a home are left out and count as unmapped.
pub fn derive_mapping(schema: &RelationalSchema, timelines: &[Timeline]) -> Result<LoadMapping, SchemaGenError> {
    if let Ok((own, mapping)) = fallback_plan(timelines, &schema.domain) {
        if own.equivalent(schema) {
            return Ok(mapping);
        }
    }
    let err = |m: &str| SchemaGenError::Mapping(m.to_string());
    let (snap, fk) = schema
        .tables_of(Archetype::Snapshot)
        .find_map(|t| {
            t.foreign_keys
                .iter()
                .find(|fk| schema.table(&fk.to_table).is_some_and(|x| x.archetype == Archetype::Entity))
                .map(|fk| (t, fk))
        })
        .ok_or_else(|| err("no snapshot table references an entity table"))?;
    let entity = schema.table(&fk.to_table).expect("checked above");
    let anchor = snap.anchor_column(DEFAULT_ANCHOR).ok_or_else(|| err("snapshot table has no snapshot_id column"))?;
    let label = |t: &TableDef| -> Option<String> {
        let texts: Vec<&ColumnDef> =
            t.columns.iter().filter(|c| c.sql_type == SqlType::Text && !t.primary_key.contains(&c.name)).collect();
        let unique = |c: &ColumnDef| t.unique_keys.iter().any(|u| u.len() == 1 && u[0].eq_ignore_ascii_case(&c.name));
        texts.iter().copied().find(|c| unique(c)).or_else(|| texts.first().copied()).map(|c| c.name.clone())
    };
    let lookup = |t: &TableDef| -> Option<LookupTarget> {
        Some(LookupTarget { table: t.name.clone(), key: t.primary_key.first()?.clone(), label: label(t)? })
    };
    let mapping_entity = lookup(entity).ok_or_else(|| err("entity table has no text label"))?;

    let mut roles = None;
    for b in schema.tables_of(Archetype::Bridge) {
        let Some(to_snap) = b.foreign_keys.iter().find(|f| f.to_table.eq_ignore_ascii_case(&snap.name)) else { continue };
        let col_for = |target: &str| {
            to_snap.to_columns.iter().position(|c| c.eq_ignore_ascii_case(target)).map(|i| to_snap.from_columns[i].clone())
        };
        let Some(anchor_column) = col_for(&anchor.name) else { continue };
        let role_fk = b.foreign_keys.iter().find(|f| schema.table(&f.to_table).is_some_and(|x| x.archetype == Archetype::Attribute));
        let holder_fk = b.foreign_keys.iter().find(|f| {
            schema.table(&f.to_table).is_some_and(|x| x.archetype == Archetype::Entity && x.name != entity.name)
        });
        let (Some(role_fk), Some(holder_fk)) = (role_fk, holder_fk) else { continue };
        let (Some(role), Some(holder)) =
            (schema.table(&role_fk.to_table).and_then(lookup), schema.table(&holder_fk.to_table).and_then(lookup))
        else {
            continue;
        };
        let entity_column = col_for(&fk.from_columns[0]).or_else(|| {
            b.foreign_keys.iter().find(|f| f.to_table.eq_ignore_ascii_case(&entity.name)).map(|f| f.from_columns[0].clone())
        });
        roles = Some(RoleTarget {
            bridge: b.name.clone(),
            anchor_column,
            entity_column,
            role,
            role_column: role_fk.from_columns[0].clone(),
            holder,
            holder_column: holder_fk.from_columns[0].clone(),
        });
        break;
    }

    let mut fields = BTreeMap::new();
    let reserved = [anchor.name.to_lowercase(), fk.from_columns[0].to_lowercase()];
    let find = |name: &str| snap.columns.iter().find(|c| c.name.eq_ignore_ascii_case(name) && !reserved.contains(&c.name.to_lowercase()));
    for p in profile_fields(timelines) {
        let target = if let (FieldKind::Composite { separator }, [a, b]) =
            (&p.kind, p.name.split('/').collect::<Vec<_>>().as_slice())
        {
            match (find(&column_name(a)), find(&column_name(b))) {
                (Some(a), Some(b)) => Some(FieldTarget::Composite { columns: [a.name.clone(), b.name.clone()], separator: separator.clone() }),
                _ => None,
            }
        } else if let Some(c) = find(&column_name(&p.name)) {
            Some(FieldTarget::Column { column: c.name.clone(), sql_type: c.sql_type })
        } else if p.kind == FieldKind::Role && roles.is_some() {
            Some(FieldTarget::Role { title: role_title(&p.name) })
        } else {
            None
        };
        if let Some(t) = target {
            fields.insert(p.name, t);
        }
    }
    Ok(LoadMapping {
        entity: mapping_entity,
        snapshot: SnapshotTarget { table: snap.name.clone(), anchor: anchor.name.clone(), entity_column: fk.from_columns[0].clone() },
        roles,
        fields,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::parse_timeline;
    use crate::llmclient::{RecordEntry, RecordStore};

    fn corpus(domain: &str) -> Vec<Timeline> {
        let dir = format!("{}/fixtures/corpus/{domain}", env!("CARGO_MANIFEST_DIR"));
        let mut paths: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        paths.sort();
        paths.iter().map(|p| parse_timeline(&std::fs::read(p).unwrap()).unwrap()).collect()
    }

    const B1: &str = include_str!("../fixtures/schemas/flash/countries.sql");

    #[test]
    fn prompt_content_and_bounds() {
        let ts = corpus("countries");
        let p = build_schema_prompt(&ts, "countries").unwrap();
        assert!(p.contains("Third Normal Form"));
        assert!(p.contains(INSTRUCTION));
        assert!(p.contains("Arendia") && p.contains("Borduria"));
        for a in ["Entity tables", "Attribute tables", "Snapshot tables", "Bridge tables"] {
            assert!(p.contains(a));
        }
        assert_eq!(p, build_schema_prompt(&ts, "countries").unwrap());
        let four: Vec<Timeline> = ts.iter().chain(&ts).cloned().collect();
        assert!(matches!(build_schema_prompt(&four, "countries"), Err(SchemaGenError::ExampleCount(4))));
        assert!(matches!(build_schema_prompt(&ts[..1], "countries"), Err(SchemaGenError::ExampleCount(1))));
        let mixed = vec![ts[0].clone(), corpus("cricket_team")[0].clone()];
        assert!(matches!(build_schema_prompt(&mixed, "countries"), Err(SchemaGenError::MixedDomains(_))));
    }

    fn replay_with(prompt: &str, response: &str) -> LlmClient {
        let mut store = RecordStore::in_memory();
        let request = CompletionRequest::new("schema-model", prompt, "");
        store.insert(RecordEntry { hash: request.hash(), request, response: response.into(), finish_reason: None }).unwrap();
        LlmClient::replay(store)
    }

    #[test]
    fn replayed_reference_ddl_yields_a_passing_schema() {
        let prompt = build_schema_prompt(&corpus("countries"), "countries").unwrap();
        let response = format!("Here is the schema:\n```sql\n{B1}```\nIt is in 3NF.");
        let client = replay_with(&prompt, &response);
        let g = generate_schema_llm(&prompt, &client, "schema-model", "countries").unwrap();
        assert!(g.report.passed, "{}", g.report.summary());
        assert!(g.schema.equivalent(&schema::parse_ddl(B1).unwrap()));
        let again = generate_schema_llm(&prompt, &client, "schema-model", "countries").unwrap();
        assert_eq!(schema::emit_ddl(&g.schema).unwrap(), schema::emit_ddl(&again.schema).unwrap());
    }

    #[test]
    fn refusal_is_an_extraction_error() {
        match schema_from_response("I cannot help", "countries") {
            Err(SchemaGenError::NoDdl { response }) => assert_eq!(response, "I cannot help"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bare_statements_are_found() {
        let text = format!("Sure. {} Let me know.", B1.replace('\n', " "));
        let g = schema_from_response(&text, "countries").unwrap();
        assert_eq!(g.schema.tables.len(), 5);
    }

    #[test]
    fn malformed_third_statement_is_named() {
        let broken = "```sql\n\
            CREATE TABLE A (a_id INTEGER PRIMARY KEY, a_name TEXT UNIQUE);\n\
            CREATE TABLE B (b_id INTEGER PRIMARY KEY, b_name TEXT UNIQUE);\n\
            CREATE TABLE C (c_id INTEGER PRIMARY KEY, c_name TEXT UNIQUE,, FOREIGN KEY);\n\
            CREATE TABLE D (snapshot_id TEXT PRIMARY KEY, a_id INTEGER REFERENCES A(a_id));\n\
            CREATE TABLE E (snapshot_id TEXT REFERENCES D(snapshot_id), b_id INTEGER REFERENCES B(b_id), PRIMARY KEY (snapshot_id, b_id));\n\
            ```";
        match schema_from_response(broken, "x") {
            Err(SchemaGenError::Parse { source: SchemaError::Parse { statement, .. }, response }) => {
                assert_eq!(statement, 3);
                assert_eq!(response, broken);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn first_parseable_candidate_wins() {
        let text = "```sql\nCREATE TABLE Bad (\n```\n```sql\nCREATE TABLE T (snapshot_id TEXT PRIMARY KEY);\n```\n```sql\nCREATE TABLE U (snapshot_id TEXT PRIMARY KEY);\n```";
        let g = schema_from_response(text, "x").unwrap();
        assert_eq!(g.schema.tables[0].name, "T");
    }

    #[test]
    fn fallback_matches_reference_shape() {
        let s = generate_schema_fallback(&corpus("countries"), "countries").unwrap();
        assert_eq!(s.tables.len(), 5);
        assert_eq!(s.shape(), schema::parse_ddl(B1).unwrap().shape());
        assert!(schema::validate_3nf(&s, None).passed);
        let names: Vec<&str> = s.table("Snapshots").unwrap().columns.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, ["snapshot_id", "entity_id", "gdp_nominal", "hdi", "population", "gini"]);
    }

    #[test]
    fn fallback_field_kinds_on_fixtures() {
        let cricket = fallback_plan(&corpus("cricket_team"), "cricket_team").unwrap();
        assert_eq!(cricket.0.tables[0].name, "CricketTeams");
        assert!(matches!(&cricket.1.fields["test_wins/test_losses"], FieldTarget::Composite { columns, .. } if columns == &["test_wins".to_string(), "test_losses".to_string()]));
        assert_eq!(cricket.1.fields["t20i_captain"], FieldTarget::Role { title: "t20i captain".into() });
        assert_eq!(cricket.1.fields["odi_wins_this_year"], FieldTarget::Column { column: "odi_wins_this_year".into(), sql_type: SqlType::Integer });
        let gov = fallback_plan(&corpus("gov_agencies"), "gov_agencies").unwrap();
        assert_eq!(gov.1.fields["budget.amount"], FieldTarget::Column { column: "budget_amount".into(), sql_type: SqlType::Real });
        assert_eq!(gov.1.fields["formed"], FieldTarget::Column { column: "formed".into(), sql_type: SqlType::Date });
        assert_eq!(gov.1.fields["employees"], FieldTarget::Column { column: "employees".into(), sql_type: SqlType::Integer });
    }

    #[test]
    fn numeric_only_gives_two_tables_and_empty_is_degenerate() {
        let t = parse_timeline(br#"{"entity":"X","domain":"d","snapshots":[{"timestamp":"2020","fields":{"a":"1","b":"2.5"}}]}"#).unwrap();
        let s = generate_schema_fallback(&[t], "d").unwrap();
        assert_eq!(s.tables.len(), 2);
        let empty = parse_timeline(br#"{"entity":"X","domain":"d","snapshots":[{"timestamp":"2020","fields":{"a":"n/a"}}]}"#).unwrap();
        assert!(matches!(generate_schema_fallback(&[empty], "d"), Err(SchemaGenError::Degenerate(_))));
        assert!(matches!(generate_schema_fallback(&[], "d"), Err(SchemaGenError::Degenerate(_))));
    }

    #[test]
    fn column_names_are_safe() {
        assert_eq!(column_name("GDP (PPP)"), "gdp_ppp");
        assert_eq!(column_name("2020 rank"), "n_2020_rank");
        assert_eq!(column_name("order"), "order_value");
        assert_eq!(column_name("wins_and_losses"), "wins_losses");
        assert_eq!(column_name("budget.amount"), "budget_amount");
        assert_eq!(column_name("??"), "field");
    }

    #[test]
    fn mapping_for_reference_schema_uses_its_tables() {
        let s = schema::parse_ddl(B1).unwrap();
        let m = derive_mapping(&s, &corpus("countries")).unwrap();
        assert_eq!(m.entity, LookupTarget { table: "Countries".into(), key: "country_id".into(), label: "country_name".into() });
        assert_eq!(m.snapshot.entity_column, "country_id");
        let r = m.roles.as_ref().unwrap();
        assert_eq!((r.bridge.as_str(), r.role.table.as_str(), r.holder.table.as_str()), ("SnapshotLeaders", "LeaderRoles", "Leaders"));
        assert_eq!(r.entity_column, None);
        assert_eq!(m.fields["gdp_nominal"], FieldTarget::Column { column: "gdp_nominal".into(), sql_type: SqlType::Integer });
        assert_eq!(m.fields["president"], FieldTarget::Role { title: "president".into() });
        assert!(!m.fields.contains_key("population"));
        m.check(&s).unwrap();
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn value() -> impl Strategy<Value = Value> {
            prop_oneof![
                Just(Value::Null),
                "(n/a|--|vacant)".prop_map(Value::String),
                "[0-9]{1,4}".prop_map(Value::String),
                "[0-9]{1,2}\\.[0-9]{1,2}".prop_map(Value::String),
                "[0-9]{1,3}/[0-9]{1,3}".prop_map(Value::String),
                "[A-Z][a-z]{2,5} [A-Z][a-z]{2,5}".prop_map(Value::String),
                "[a-z]{1,4}[0-9]{1,2}".prop_map(Value::String),
                "(1 May 2001|2004-02-03|Mar 3, 2001)".prop_map(Value::String),
                (0i64..100).prop_map(Value::from),
            ]
        }

        fn timelines() -> impl Strategy<Value = Vec<Timeline>> {
            let key = "[a-z]{1,6}(_[a-z]{1,5})?(/[a-z]{1,4})?";
            let snaps = prop::collection::btree_map(1990u32..2030, prop::collection::btree_map(key, value(), 0..7), 1..6);
            prop::collection::vec(snaps, 1..4).prop_map(|ents| {
                ents.into_iter()
                    .enumerate()
                    .map(|(i, snaps)| {
                        let snaps: Vec<Value> = snaps
                            .into_iter()
                            .map(|(y, f)| serde_json::json!({"timestamp": y.to_string(), "fields": f}))
                            .collect();
                        let doc = serde_json::json!({"entity": format!("E{i}"), "domain": "synthetic", "snapshots": snaps});
                        parse_timeline(doc.to_string().as_bytes()).unwrap()
                    })
                    .collect()
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(128))]
            #[test]
            fn fallback_is_small_normal_and_loadable(ts in timelines()) {
                match fallback_plan(&ts, "synthetic") {
                    Err(SchemaGenError::Degenerate(_)) => {
                        prop_assert!(profile_fields(&ts).is_empty());
                    }
                    Err(e) => prop_assert!(false, "{e}"),
                    Ok((s, m)) => {
                        prop_assert!((2..=5).contains(&s.tables.len()));
                        prop_assert!(s.tables_of(Archetype::Snapshot).count() >= 1);
                        let report = schema::validate_3nf(&s, None);
                        prop_assert!(report.passed, "{}", report.summary());
                        let db = crate::populate::Database::in_memory(&s).unwrap();
                        for t in &ts {
                            let r = crate::populate::populate_timeline(&db, &s, t, &m, &Default::default()).unwrap();
                            prop_assert!(r.is_balanced());
                        }
                        prop_assert!(crate::populate::verify_integrity(&db, &s).unwrap().is_empty());
                        prop_assert_eq!(derive_mapping(&s, &ts).unwrap(), m);
                    }
                }
            }
        }
    }
}

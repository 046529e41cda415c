//! Question patterns, the five-section domain prompt, and execution-checked
//! gold queries.
//!
//! Templates carry two kinds of placeholder. Upper-case ones (`{X}`, `{E}`)
//! come from the question and are untrusted. Lower-case ones
//! (`{snapshot_table}`, `{same_snapshot(b,s)}`, `{column(F)}`) come from the
//! load mapping and name schema objects.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::evalharness::{exact_match, execute_query, render_answer, token_f1, ReadOnlyDb, DEFAULT_TIMEOUT};
use crate::llmclient::{CompletionRequest, LlmClient, LlmError, Transport, TransportError, TransportReply};
use crate::populate::{quote, FieldTarget, LoadMapping};
use crate::schema::{emit_ddl, is_keyword, parse_ddl, Archetype, RelationalSchema, SchemaError};
use crate::sqlgen::{extract_sql, Catalog, SafeSql};

pub const DEFAULT_FEW_SHOT_FLOOR: usize = 10;
pub const FEW_SHOT_CEILING: usize = 15;
pub const DEFAULT_MAX_ITERS: usize = 5;

/// Always present in a bundle built by [`PromptBundle::new`].
pub const CRITICAL_RULES: [&str; 6] = [
    "Never hardcode entity IDs; always use subqueries",
    "Use DISTINCT for queries spanning multiple snapshots",
    "Use only tables and columns that appear in the schema above",
    "Put MIN(), MAX() or SUM() in ORDER BY only together with GROUP BY",
    "Compute durations as JULIANDAY() differences of snapshot dates",
    "Answer with one SQLite SELECT statement in a ```sql fenced block",
];

const DEFAULT_PATTERNS: &str = include_str!("../data/patterns.json");

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("missing binding {0}")]
    MissingBinding(String),
    #[error("binding {name}={value:?} is neither an identifier nor a number")]
    UnsafeBinding { name: String, value: String },
    #[error("unknown placeholder {{{name}}} in {pattern} template")]
    UnknownPlaceholder { pattern: String, name: String },
    #[error("no column holds field {0:?}")]
    UnknownField(String),
    #[error("few-shot section has {have} examples; {} more needed to reach {floor}", floor - have)]
    FewShotDeficit { have: usize, floor: usize },
    #[error("few-shot section has {have} examples; at most {ceiling} allowed")]
    TooManyExamples { have: usize, ceiling: usize },
    #[error("max_iters must be at least 1")]
    NoIterations,
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    BeforeAfter,
    ConcurrentRole,
    TemporalAggregation,
    TenureDuration,
    TemporalExtrema,
}

impl PatternKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PatternKind::BeforeAfter => "before_after",
            PatternKind::ConcurrentRole => "concurrent_role",
            PatternKind::TemporalAggregation => "temporal_aggregation",
            PatternKind::TenureDuration => "tenure_duration",
            PatternKind::TemporalExtrema => "temporal_extrema",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternTemplate {
    pub name: PatternKind,
    pub nl_template: String,
    pub sql_template: String,
}

const SCHEMA_NAMES: [&str; 16] = [
    "entity_table",
    "entity_key",
    "entity_label",
    "snapshot_table",
    "anchor",
    "snapshot_entity",
    "bridge_table",
    "bridge_anchor",
    "bridge_role",
    "bridge_holder",
    "holder_table",
    "holder_key",
    "holder_label",
    "role_table",
    "role_key",
    "role_label",
];

struct Slot<'a> {
    start: usize,
    end: usize,
    name: &'a str,
    args: Vec<&'a str>,
}

fn slots(template: &str) -> Vec<Slot<'_>> {
    regex!(r"\{([A-Za-z_][A-Za-z0-9_]*)(?:\(([^(){}]*)\))?\}")
        .captures_iter(template)
        .map(|c| {
            let m = c.get(0).expect("whole match");
            Slot {
                start: m.start(),
                end: m.end(),
                name: c.get(1).expect("name").as_str(),
                args: c.get(2).map_or(vec![], |a| a.as_str().split(',').map(str::trim).collect()),
            }
        })
        .collect()
}

fn is_question_slot(name: &str) -> bool {
    name.chars().next().is_some_and(|c| c.is_ascii_uppercase()) && !name.chars().any(|c| c.is_ascii_lowercase())
}

fn is_number(v: &str) -> bool {
    regex!(r"^-?[0-9]+(\.[0-9]+)?$").is_match(v)
}

fn is_plain_ident(s: &str) -> bool {
    regex!(r"^[A-Za-z_][A-Za-z0-9_]*$").is_match(s)
}

/// Bare when safe, double-quoted otherwise.
fn ident(name: &str) -> String {
    if is_plain_ident(name) && !is_keyword(name) {
        name.to_string()
    } else {
        quote(name)
    }
}

impl PatternTemplate {
    pub fn question_slots(&self) -> BTreeSet<String> {
        slots(&self.nl_template).iter().map(|s| s.name.to_string()).collect()
    }

    /// Every SQL placeholder is bound by the question or names a schema object.
    pub fn validate(&self) -> Result<(), PromptError> {
        let nl = self.question_slots();
        let unknown = |name: &str| PromptError::UnknownPlaceholder { pattern: self.name.as_str().into(), name: name.into() };
        if let Some(s) = nl.iter().find(|s| !is_question_slot(s)) {
            return Err(unknown(s));
        }
        for s in slots(&self.sql_template) {
            let ok = match s.name {
                n if is_question_slot(n) => nl.contains(n) && s.args.is_empty(),
                "same_snapshot" => s.args.len() == 2 && s.args.iter().all(|a| is_plain_ident(a)),
                "column" => s.args.len() == 1 && nl.contains(s.args[0]),
                n => SCHEMA_NAMES.contains(&n) && s.args.is_empty(),
            };
            if !ok {
                return Err(unknown(s.name));
            }
        }
        Ok(())
    }

    /// Schema names filled in, question placeholders left for the reader.
    pub fn specialize(&self, schema: &SchemaBindings) -> Result<PatternTemplate, PromptError> {
        Ok(PatternTemplate { sql_template: render(&self.sql_template, None, Some(schema))?, ..self.clone() })
    }
}

pub fn default_patterns() -> Vec<PatternTemplate> {
    serde_json::from_str(DEFAULT_PATTERNS).expect("bundled patterns parse")
}

pub fn load_patterns(path: &Path) -> Result<Vec<PatternTemplate>, PromptError> {
    let text = read(path)?;
    let patterns: Vec<PatternTemplate> =
        serde_json::from_str(&text).map_err(|e| PromptError::Io { path: path.display().to_string(), message: e.to_string() })?;
    for p in &patterns {
        p.validate()?;
    }
    Ok(patterns)
}

/// Schema object names a template may refer to, derived from a load mapping.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaBindings {
    pub names: BTreeMap<String, String>,
    pub bridge_entity: Option<String>,
    /// Field name as a question would spell it, to snapshot column.
    pub field_columns: BTreeMap<String, String>,
}

impl SchemaBindings {
    pub fn from_mapping(mapping: &LoadMapping) -> Self {
        let mut names = BTreeMap::new();
        let mut put = |k: &str, v: &str| {
            names.insert(k.to_string(), v.to_string());
        };
        put("entity_table", &mapping.entity.table);
        put("entity_key", &mapping.entity.key);
        put("entity_label", &mapping.entity.label);
        put("snapshot_table", &mapping.snapshot.table);
        put("anchor", &mapping.snapshot.anchor);
        put("snapshot_entity", &mapping.snapshot.entity_column);
        if let Some(r) = &mapping.roles {
            put("bridge_table", &r.bridge);
            put("bridge_anchor", &r.anchor_column);
            put("bridge_role", &r.role_column);
            put("bridge_holder", &r.holder_column);
            put("holder_table", &r.holder.table);
            put("holder_key", &r.holder.key);
            put("holder_label", &r.holder.label);
            put("role_table", &r.role.table);
            put("role_key", &r.role.key);
            put("role_label", &r.role.label);
        }
        let mut field_columns = BTreeMap::new();
        for (field, target) in &mapping.fields {
            match target {
                FieldTarget::Column { column, .. } => {
                    field_columns.insert(field.clone(), column.clone());
                    field_columns.insert(field.replace('.', "_"), column.clone());
                }
                FieldTarget::Composite { columns, .. } => {
                    for (half, column) in field.split('/').zip(columns) {
                        field_columns.insert(half.trim().to_string(), column.clone());
                    }
                }
                _ => {}
            }
        }
        Self { names, bridge_entity: mapping.roles.as_ref().and_then(|r| r.entity_column.clone()), field_columns }
    }

    fn column_for(&self, field: &str) -> Result<String, PromptError> {
        if let Some(c) = self.field_columns.get(field) {
            return Ok(c.clone());
        }
        if self.field_columns.values().any(|c| c == field) {
            return Ok(field.to_string());
        }
        Err(PromptError::UnknownField(field.to_string()))
    }
}

/// Fills placeholders. A `None` side leaves its placeholders untouched.
fn render(
    template: &str,
    question: Option<&BTreeMap<String, String>>,
    schema: Option<&SchemaBindings>,
) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len());
    let mut last = 0;
    for s in slots(template) {
        out.push_str(&template[last..s.start]);
        last = s.end;
        let original = &template[s.start..s.end];
        let in_literal = template[..s.start].matches('\'').count() % 2 == 1;
        let text = match (s.name, question, schema) {
            (n, Some(q), _) if is_question_slot(n) => {
                let v = q.get(n).ok_or_else(|| PromptError::MissingBinding(n.into()))?;
                if in_literal {
                    v.replace('\'', "''")
                } else if is_plain_ident(v) || is_number(v) {
                    v.clone()
                } else {
                    return Err(PromptError::UnsafeBinding { name: n.into(), value: v.clone() });
                }
            }
            (n, None, _) if is_question_slot(n) => original.to_string(),
            (_, _, None) => original.to_string(),
            ("same_snapshot", _, Some(b)) => {
                let name = |k: &str| b.names.get(k).map(|v| ident(v)).ok_or_else(|| PromptError::MissingBinding(k.into()));
                let (l, r) = (s.args[0], s.args[1]);
                let mut t = format!("{l}.{} = {r}.{}", name("bridge_anchor")?, name("anchor")?);
                if let Some(e) = &b.bridge_entity {
                    t.push_str(&format!(" AND {l}.{} = {r}.{}", ident(e), name("snapshot_entity")?));
                }
                t
            }
            ("column", None, Some(_)) => original.to_string(),
            ("column", Some(q), Some(b)) => {
                let field = q.get(s.args[0]).ok_or_else(|| PromptError::MissingBinding(s.args[0].into()))?;
                ident(&b.column_for(field)?)
            }
            (n, _, Some(b)) => ident(b.names.get(n).ok_or_else(|| PromptError::MissingBinding(n.into()))?),
        };
        out.push_str(&text);
    }
    out.push_str(&template[last..]);
    Ok(out)
}

/// The question and SQL for one set of bindings. Values in string literals
/// have quotes doubled; values elsewhere must be identifiers or numbers.
pub fn instantiate_pattern(
    template: &PatternTemplate,
    bindings: &BTreeMap<String, String>,
    schema: &SchemaBindings,
) -> Result<(String, String), PromptError> {
    let question = regex!(r"\{([A-Z][A-Z0-9_]*)\}").replace_all(&template.nl_template, |c: &regex::Captures| {
        bindings.get(&c[1]).cloned().unwrap_or_else(|| c[0].to_string())
    });
    if let Some(missing) = template.question_slots().into_iter().find(|s| !bindings.contains_key(s)) {
        return Err(PromptError::MissingBinding(missing));
    }
    let sql = render(&template.sql_template, Some(bindings), Some(schema))?;
    Ok((question.into_owned(), sql))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub question: String,
    pub gold_sql: String,
    pub expected_answer: String,
    pub validated: bool,
    pub iterations_used: usize,
}

impl FewShotExample {
    /// Re-executes the gold query and compares under exact match.
    pub fn revalidate(&self, db: &ReadOnlyDb, catalog: &Catalog) -> bool {
        SafeSql::check(&self.gold_sql, catalog)
            .ok()
            .and_then(|sql| execute_query(db, &sql, DEFAULT_TIMEOUT).ok())
            .is_some_and(|rs| exact_match(&self.expected_answer, &render_answer(&rs)) == 1)
    }
}

/// Plain-language notes on what each table holds and how tables join.
pub fn describe_relationships(schema: &RelationalSchema, mapping: Option<&LoadMapping>) -> String {
    let mut out = String::new();
    for t in &schema.tables {
        let what = match t.archetype {
            Archetype::Entity => "one row per tracked entity",
            Archetype::Snapshot => "one row per entity per timeline snapshot; the state at that time",
            Archetype::Attribute => "lookup vocabulary shared across snapshots",
            Archetype::Bridge => "links snapshots to lookup rows; one row per pairing",
        };
        out.push_str(&format!("- {} ({}): {what}. Key ({}).\n", t.name, t.archetype, t.primary_key.join(", ")));
        for fk in &t.foreign_keys {
            out.push_str(&format!(
                "  - {}.({}) references {}.({}).\n",
                t.name,
                fk.from_columns.join(", "),
                fk.to_table,
                fk.to_columns.join(", ")
            ));
        }
    }
    if let Some(m) = mapping {
        out.push_str(&format!(
            "\nTime: {}.{} holds the snapshot timestamp as ISO-8601 text. It sorts chronologically as text; \
             the first four characters are the year. {}.{} says which {} row the snapshot describes; \
             find it with a subquery on {}.{}.\n",
            m.snapshot.table, m.snapshot.anchor, m.snapshot.table, m.snapshot.entity_column, m.entity.table, m.entity.table, m.entity.label
        ));
        if let Some(r) = &m.roles {
            let titles: BTreeSet<&str> = m
                .fields
                .values()
                .filter_map(|t| match t {
                    FieldTarget::Role { title } => Some(title.as_str()),
                    _ => None,
                })
                .collect();
            out.push_str(&format!(
                "\nRoles: {} has one row per (snapshot, role, holder). {}.{} names the role and {}.{} the person. \
                 A person holds a role for every snapshot that lists them.",
                r.bridge, r.role.table, r.role.label, r.holder.table, r.holder.label
            ));
            if !titles.is_empty() {
                let list: Vec<String> = titles.iter().map(|t| format!("'{t}'")).collect();
                out.push_str(&format!(" Role titles include {}.", list.join(", ")));
            }
            out.push('\n');
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub schema_ddl: String,
    pub relationship_prose: String,
    pub patterns: Vec<PatternTemplate>,
    pub few_shot: Vec<FewShotExample>,
    pub critical_rules: Vec<String>,
    /// Lowered in tests; the finalized prompt needs this many examples.
    pub floor: usize,
}

const FILES: [&str; 6] = ["schema.sql", "relationships.md", "patterns.json", "fewshot.jsonl", "rules.txt", "prompt.txt"];

fn read(path: &Path) -> Result<String, PromptError> {
    fs::read_to_string(path).map_err(|e| PromptError::Io { path: path.display().to_string(), message: e.to_string() })
}

fn write(path: &Path, text: &str) -> Result<(), PromptError> {
    fs::write(path, text).map_err(|e| PromptError::Io { path: path.display().to_string(), message: e.to_string() })
}

impl PromptBundle {
    /// A bundle with no examples yet. Templates are specialized to the
    /// mapping's schema names when one is given.
    pub fn new(schema: &RelationalSchema, mapping: Option<&LoadMapping>, patterns: &[PatternTemplate]) -> Result<Self, PromptError> {
        let patterns = match mapping {
            Some(m) => {
                let b = SchemaBindings::from_mapping(m);
                // a template whose schema names are missing (no roles) is dropped
                patterns.iter().filter_map(|p| p.specialize(&b).ok()).collect()
            }
            None => patterns.to_vec(),
        };
        Ok(Self {
            schema_ddl: emit_ddl(schema)?,
            relationship_prose: describe_relationships(schema, mapping),
            patterns,
            few_shot: vec![],
            critical_rules: CRITICAL_RULES.iter().map(|s| s.to_string()).collect(),
            floor: DEFAULT_FEW_SHOT_FLOOR,
        })
    }

    pub fn with_floor(mut self, floor: usize) -> Self {
        self.floor = floor;
        self
    }

    /// Tables the prompt's schema defines. Empty if the DDL does not parse.
    pub fn catalog(&self) -> Catalog {
        parse_ddl(&self.schema_ddl).map(|s| Catalog::from_schema(&s)).unwrap_or_default()
    }

    fn render(&self, with_examples: bool) -> String {
        let mut out = String::new();
        out.push_str("## 1. Schema\n\n```sql\n");
        out.push_str(self.schema_ddl.trim_end());
        out.push_str("\n```\n\n## 2. Tables and relationships\n\n");
        out.push_str(self.relationship_prose.trim_end());
        out.push_str("\n\n## 3. Query patterns\n");
        for p in &self.patterns {
            out.push_str(&format!("\n### {}\nQuestion: {}\n```sql\n{}\n```\n", p.name.as_str(), p.nl_template, p.sql_template.trim_end()));
        }
        let mut n = 4;
        if with_examples {
            out.push_str("\n## 4. Examples\n");
            for e in &self.few_shot {
                out.push_str(&format!("\nQuestion: {}\n```sql\n{}\n```\n", e.question, e.gold_sql.trim_end()));
            }
            n = 5;
        }
        out.push_str(&format!("\n## {n}. Critical rules\n\n"));
        for r in &self.critical_rules {
            out.push_str(&format!("- {r}\n"));
        }
        out
    }

    /// The full domain prompt: schema, relationships, patterns, examples,
    /// rules, in that order. Byte-stable for a given bundle.
    pub fn assemble(&self) -> Result<String, PromptError> {
        let have = self.few_shot.len();
        if have < self.floor {
            return Err(PromptError::FewShotDeficit { have, floor: self.floor });
        }
        if have > FEW_SHOT_CEILING {
            return Err(PromptError::TooManyExamples { have, ceiling: FEW_SHOT_CEILING });
        }
        Ok(self.render(true))
    }

    /// The prompt without examples, used while the examples are being built.
    pub fn reference_prompt(&self) -> String {
        self.render(false)
    }

    pub fn save(&self, dir: &Path) -> Result<(), PromptError> {
        fs::create_dir_all(dir).map_err(|e| PromptError::Io { path: dir.display().to_string(), message: e.to_string() })?;
        write(&dir.join(FILES[0]), &self.schema_ddl)?;
        write(&dir.join(FILES[1]), &self.relationship_prose)?;
        write(&dir.join(FILES[2]), &(json(&self.patterns) + "\n"))?;
        let lines: String = self.few_shot.iter().map(|e| json(e) + "\n").collect();
        write(&dir.join(FILES[3]), &lines)?;
        write(&dir.join(FILES[4]), &self.critical_rules.iter().map(|r| format!("{r}\n")).collect::<String>())?;
        let prompt = dir.join(FILES[5]);
        match self.assemble() {
            Ok(text) => write(&prompt, &text)?,
            Err(_) if prompt.exists() => {
                fs::remove_file(&prompt).map_err(|e| PromptError::Io { path: prompt.display().to_string(), message: e.to_string() })?
            }
            Err(_) => {}
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, PromptError> {
        let bad = |p: &Path, e: serde_json::Error| PromptError::Io { path: p.display().to_string(), message: e.to_string() };
        let fewshot = dir.join(FILES[3]);
        let few_shot = read(&fewshot)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| bad(&fewshot, e)))
            .collect::<Result<Vec<FewShotExample>, _>>()?;
        Ok(Self {
            schema_ddl: read(&dir.join(FILES[0]))?,
            relationship_prose: read(&dir.join(FILES[1]))?,
            patterns: load_patterns(&dir.join(FILES[2]))?,
            few_shot,
            critical_rules: read(&dir.join(FILES[4]))?.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect(),
            floor: DEFAULT_FEW_SHOT_FLOOR,
        })
    }
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain data serializes")
}

const REFINE_TASK: &str = "Write one SQLite SELECT query that answers the question below. \
Its result must equal the expected answer exactly. When a previous attempt is shown, \
study its result and revise the query.";

/// The attempt number keeps retries distinct, so a recorded run replays
/// every iteration rather than serving a repeat from cache.
fn refine_user_text(question: &str, expected: &str, attempt: usize, last: Option<(&str, &str)>) -> String {
    let mut t = format!("Question: {question}\nExpected answer: {expected}\nAttempt: {attempt}\n");
    if let Some((sql, outcome)) = last {
        t.push_str(&format!("\nPrevious attempt:\n```sql\n{sql}\n```\n{outcome}\nThis does not match the expected answer.\n"));
    }
    t
}

/// Proposes, executes and compares until the result matches `expected` or
/// `max_iters` model calls are spent. The best attempt by token F1 is kept.
#[allow(clippy::too_many_arguments)]
pub fn refine_gold_query(
    question: &str,
    expected: &str,
    db: &ReadOnlyDb,
    bundle: &PromptBundle,
    client: &LlmClient,
    model_id: &str,
    max_iters: usize,
    timeout: Duration,
) -> Result<FewShotExample, PromptError> {
    if max_iters == 0 {
        return Err(PromptError::NoIterations);
    }
    let system = format!("{}\n\n{REFINE_TASK}\n", bundle.reference_prompt());
    let catalog = bundle.catalog();
    let mut best: Option<(f64, String)> = None;
    let mut last: Option<(String, String)> = None;
    for i in 1..=max_iters {
        let user = refine_user_text(question, expected, i, last.as_ref().map(|(s, o)| (s.as_str(), o.as_str())));
        let reply = client.complete(&CompletionRequest::new(model_id, &system, &user))?;
        let Some(sql) = extract_sql(&reply.text).sql else {
            last = Some((reply.text.trim().to_string(), "No SQL query was found in the reply.".into()));
            continue;
        };
        let outcome = match SafeSql::check(&sql, &catalog) {
            Err(v) => Err(format!("Rejected: {}", v.reasons.join("; "))),
            Ok(safe) => execute_query(db, &safe, timeout).map(|rs| render_answer(&rs)).map_err(|e| format!("Error: {e}")),
        };
        match outcome {
            Ok(answer) => {
                let f1 = token_f1(expected, &answer);
                if exact_match(expected, &answer) == 1 {
                    return Ok(FewShotExample {
                        question: question.into(),
                        gold_sql: sql,
                        expected_answer: expected.into(),
                        validated: true,
                        iterations_used: i,
                    });
                }
                if best.as_ref().is_none_or(|(b, _)| f1 > *b) {
                    best = Some((f1, sql.clone()));
                }
                last = Some((sql, format!("Result: {answer:?}")));
            }
            Err(msg) => {
                // any attempt that executes outranks one that does not
                if best.is_none() {
                    best = Some((-1.0, sql.clone()));
                }
                last = Some((sql, msg));
            }
        }
    }
    Ok(FewShotExample {
        question: question.into(),
        gold_sql: best.map(|(_, s)| s).unwrap_or_default(),
        expected_answer: expected.into(),
        validated: false,
        iterations_used: max_iters,
    })
}

/// The question in a request: a `Question:` line if present, else the whole
/// user text.
fn question_of(req: &CompletionRequest) -> &str {
    req.user_text
        .lines()
        .find_map(|l| l.strip_prefix("Question: "))
        .unwrap_or(&req.user_text)
        .trim()
}

/// A deterministic stand-in for a model: recognizes questions that fit a
/// template and answers with its SQL.
pub struct PatternResponder {
    patterns: Vec<(PatternTemplate, Regex, Vec<String>)>,
    schema: SchemaBindings,
}

impl PatternResponder {
    pub fn new(patterns: &[PatternTemplate], schema: SchemaBindings) -> Self {
        let patterns = patterns
            .iter()
            .map(|p| {
                let mut re = String::from("^");
                let mut names = vec![];
                let mut last = 0;
                for s in slots(&p.nl_template) {
                    re.push_str(&regex::escape(&p.nl_template[last..s.start]));
                    re.push_str("(.+?)");
                    names.push(s.name.to_string());
                    last = s.end;
                }
                re.push_str(&regex::escape(&p.nl_template[last..]));
                re.push('$');
                (p.clone(), Regex::new(&re).expect("escaped template"), names)
            })
            .collect();
        Self { patterns, schema }
    }

    pub fn answer(&self, question: &str) -> String {
        for (p, re, names) in &self.patterns {
            let Some(c) = re.captures(question) else { continue };
            let bindings: BTreeMap<String, String> =
                names.iter().enumerate().map(|(i, n)| (n.clone(), c[i + 1].to_string())).collect();
            return match instantiate_pattern(p, &bindings, &self.schema) {
                Ok((_, sql)) => format!("```sql\n{sql}\n```"),
                Err(e) => format!("I cannot express this question against the schema: {e}."),
            };
        }
        "I do not know how to answer that question.".into()
    }
}

impl Transport for PatternResponder {
    fn send(&self, req: &CompletionRequest) -> Result<TransportReply, TransportError> {
        Ok(TransportReply::text(&self.answer(question_of(req))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::parse_timeline;
    use crate::llmclient::{RecordStore, ScriptedTransport};
    use crate::populate::{create_database, populate_timeline, LoadOptions};
    use crate::schemagen::fallback_plan;
    use std::sync::Arc;

    fn pattern(kind: PatternKind) -> PatternTemplate {
        default_patterns().into_iter().find(|p| p.name == kind).unwrap()
    }

    fn binds(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    /// The countries corpus in a file database built from the rule-based plan.
    fn countries() -> (tempfile::TempDir, ReadOnlyDb, RelationalSchema, LoadMapping) {
        let timelines: Vec<_> = [
            include_str!("../fixtures/corpus/countries/arendia.json"),
            include_str!("../fixtures/corpus/countries/borduria.json"),
        ]
        .iter()
        .map(|t| parse_timeline(t.as_bytes()).unwrap())
        .collect();
        let (schema, mapping) = fallback_plan(&timelines, "countries").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.sqlite");
        let db = create_database(&schema, &path, false).unwrap();
        for t in &timelines {
            populate_timeline(&db, &schema, t, &mapping, &LoadOptions::default()).unwrap();
        }
        drop(db);
        let ro = ReadOnlyDb::open(&path).unwrap();
        (dir, ro, schema, mapping)
    }

    #[test]
    fn bundled_patterns_are_consistent() {
        let ps = default_patterns();
        let kinds: BTreeSet<PatternKind> = ps.iter().map(|p| p.name).collect();
        assert_eq!(kinds.len(), 5);
        for p in &ps {
            p.validate().unwrap();
        }
        let bad = PatternTemplate { sql_template: "SELECT {W} FROM {snapshot_table}".into(), ..pattern(PatternKind::BeforeAfter) };
        assert!(matches!(bad.validate(), Err(PromptError::UnknownPlaceholder { name, .. }) if name == "W"));
    }

    #[test]
    fn before_after_instantiation() {
        let (_d, _db, _s, mapping) = countries();
        let b = SchemaBindings::from_mapping(&mapping);
        let (q, sql) =
            instantiate_pattern(&pattern(PatternKind::BeforeAfter), &binds(&[("X", "captain"), ("Y", "Rohit Sharma")]), &b).unwrap();
        assert_eq!(q, "Who was captain before Rohit Sharma?");
        assert!(sql.contains("snapshot_id < (SELECT MIN"), "{sql}");
        let err = instantiate_pattern(&pattern(PatternKind::BeforeAfter), &binds(&[("X", "captain")]), &b).unwrap_err();
        assert!(matches!(&err, PromptError::MissingBinding(n) if n == "Y"));
        assert!(err.to_string().contains('Y'));
    }

    #[test]
    fn apostrophes_are_escaped_and_execute() {
        let (_d, db, schema, mapping) = countries();
        let b = SchemaBindings::from_mapping(&mapping);
        let (_, sql) = instantiate_pattern(
            &pattern(PatternKind::BeforeAfter),
            &binds(&[("X", "president"), ("Y", "Daniel O'Brien")]),
            &b,
        )
        .unwrap();
        assert!(sql.contains("'Daniel O''Brien'"));
        let safe = SafeSql::check(&sql, &Catalog::from_schema(&schema)).unwrap();
        let rs = execute_query(&db, &safe, DEFAULT_TIMEOUT).unwrap();
        assert_eq!(render_answer(&rs), "Sofia Reyes");
    }

    #[test]
    fn unquoted_bindings_must_be_plain() {
        let (_d, _db, _s, mapping) = countries();
        let b = SchemaBindings::from_mapping(&mapping);
        let p = pattern(PatternKind::TemporalAggregation);
        let ok = binds(&[("X", "president"), ("E", "Arendia"), ("A", "2014"), ("B", "2018")]);
        instantiate_pattern(&p, &ok, &b).unwrap();
        let mut bad = ok.clone();
        bad.insert("A".into(), "2014 OR 1=1".into());
        assert!(matches!(instantiate_pattern(&p, &bad, &b), Err(PromptError::UnsafeBinding { name, .. }) if name == "A"));
        let mut field = binds(&[("F", "no_such_field"), ("E", "Arendia")]);
        assert!(matches!(
            instantiate_pattern(&pattern(PatternKind::TemporalExtrema), &field, &b),
            Err(PromptError::UnknownField(_))
        ));
        field.insert("F".into(), "gdp_nominal".into());
        instantiate_pattern(&pattern(PatternKind::TemporalExtrema), &field, &b).unwrap();
    }

    #[test]
    fn gold_questions_answer_through_patterns() {
        let (_d, db, schema, mapping) = countries();
        let responder = PatternResponder::new(&default_patterns(), SchemaBindings::from_mapping(&mapping));
        let catalog = Catalog::from_schema(&schema);
        for line in include_str!("../fixtures/questions/countries.gold.jsonl").lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            let (q, want) = (v["question"].as_str().unwrap(), v["expected"].as_str().unwrap());
            let sql = extract_sql(&responder.answer(q)).sql.unwrap();
            let rs = execute_query(&db, &SafeSql::check(&sql, &catalog).unwrap(), DEFAULT_TIMEOUT).unwrap();
            assert_eq!(render_answer(&rs), want, "{q}");
        }
        assert!(extract_sql(&responder.answer("What is the capital?")).sql.is_none());
    }

    fn bundle_with(n: usize) -> PromptBundle {
        let (_d, _db, schema, mapping) = countries();
        let mut b = PromptBundle::new(&schema, Some(&mapping), &default_patterns()).unwrap();
        b.few_shot = (0..n)
            .map(|i| FewShotExample {
                question: format!("q{i}"),
                gold_sql: format!("SELECT {i}"),
                expected_answer: i.to_string(),
                validated: true,
                iterations_used: 1,
            })
            .collect();
        b
    }

    #[test]
    fn assembly() {
        let b = bundle_with(10);
        let text = b.assemble().unwrap();
        assert!(text.contains("Never hardcode entity IDs; always use subqueries"));
        assert!(text.contains("Use DISTINCT for queries spanning multiple snapshots"));
        assert_eq!(text, b.assemble().unwrap());
        let order: Vec<usize> = ["## 1. Schema", "## 2.", "## 3.", "## 4. Examples", "## 5. Critical"]
            .iter()
            .map(|h| text.find(h).unwrap())
            .collect();
        assert!(order.windows(2).all(|w| w[0] < w[1]));
        // specialized templates name real tables but keep question slots
        assert!(text.contains("FROM SnapshotRoles b") && text.contains("'{X}'"));

        match bundle_with(3).assemble() {
            Err(e @ PromptError::FewShotDeficit { have: 3, floor: 10 }) => assert!(e.to_string().contains("7 more")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(bundle_with(16).assemble(), Err(PromptError::TooManyExamples { .. })));
        assert!(bundle_with(3).with_floor(3).assemble().is_ok());
    }

    #[test]
    fn distinct_bundles_render_distinctly() {
        let base = bundle_with(10);
        let mut variants = vec![base.clone()];
        for i in 0..10 {
            let mut b = base.clone();
            b.few_shot[i].gold_sql.push(' ');
            b.few_shot[i].gold_sql.push('1');
            variants.push(b);
        }
        let mut b = base.clone();
        b.critical_rules.push("Prefer joins over correlated subqueries".into());
        variants.push(b);
        let texts: BTreeSet<String> = variants.iter().map(|b| b.assemble().unwrap()).collect();
        assert_eq!(texts.len(), variants.len());
    }

    #[test]
    fn bundle_directory_round_trip() {
        let b = bundle_with(10);
        let dir = tempfile::tempdir().unwrap();
        b.save(dir.path()).unwrap();
        for f in FILES {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        assert_eq!(PromptBundle::load(dir.path()).unwrap(), b);
        assert_eq!(fs::read_to_string(dir.path().join("prompt.txt")).unwrap(), b.assemble().unwrap());
    }

    fn scripted(texts: &[&str]) -> (LlmClient, Arc<ScriptedTransport>) {
        let t = Arc::new(ScriptedTransport::texts(texts));
        (LlmClient::live(t.clone(), RecordStore::in_memory()), t)
    }

    #[test]
    fn refinement_loop() {
        let (_d, db, _schema, _m) = countries();
        let b = bundle_with(0).with_floor(0);
        let wrong = "```sql\nSELECT holder_name FROM Holders ORDER BY holder_name DESC LIMIT 1\n```";
        let right = "```sql\nSELECT holder_name FROM Holders WHERE holder_name = 'Sofia Reyes'\n```";
        let timeout = DEFAULT_TIMEOUT;

        let (c, t) = scripted(&[wrong, right]);
        let e = refine_gold_query("Who?", "Sofia Reyes", &db, &b, &c, "m", 5, timeout).unwrap();
        assert_eq!((e.validated, e.iterations_used, t.calls()), (true, 2, 2));
        assert!(e.revalidate(&db, &b.catalog()));

        let (c, t) = scripted(&[right]);
        let e = refine_gold_query("Who?", "Sofia Reyes", &db, &b, &c, "m", 5, timeout).unwrap();
        assert_eq!((e.validated, e.iterations_used, t.calls()), (true, 1, 1));

        let (c, t) = scripted(&["no idea", "```sql\nSELECT nope FROM Holders\n```", wrong, wrong, wrong, right]);
        let e = refine_gold_query("Who?", "Sofia Reyes", &db, &b, &c, "m", 5, timeout).unwrap();
        assert_eq!((e.validated, e.iterations_used, t.calls()), (false, 5, 5));
        assert!(e.gold_sql.contains("DESC LIMIT 1"), "an executing attempt beats an erroring one");

        let (c, _) = scripted(&[]);
        assert!(matches!(refine_gold_query("Who?", "x", &db, &b, &c, "m", 0, timeout), Err(PromptError::NoIterations)));
        assert!(matches!(refine_gold_query("Who?", "x", &db, &b, &c, "m", 1, timeout), Err(PromptError::Llm(_))));
    }

    #[test]
    fn feedback_carries_sql_result_and_expectation() {
        let t = refine_user_text("Who?", "Sofia Reyes", 2, Some(("SELECT 1", "Result: \"1\"")));
        assert!(t.starts_with("Question: Who?\nExpected answer: Sofia Reyes\nAttempt: 2\n"));
        assert!(t.contains("SELECT 1") && t.contains("Result: \"1\""));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn refinement_never_exceeds_budget(max in 1usize..7, wrong in 0usize..9) {
                let (_d, db, _s, _m) = countries();
                let b = bundle_with(0).with_floor(0);
                let mut script = vec!["```sql\nSELECT 'no'\n```"; wrong];
                script.push("```sql\nSELECT 'yes'\n```");
                let (c, t) = scripted(&script);
                let e = refine_gold_query("Q", "yes", &db, &b, &c, "m", max, DEFAULT_TIMEOUT).unwrap();
                prop_assert!(t.calls() <= max);
                prop_assert_eq!(e.iterations_used, t.calls());
                prop_assert_eq!(e.validated, wrong < max);
            }

            #[test]
            fn quoted_values_round_trip(name in "[A-Za-z' ]{1,20}") {
                let (_d, db, schema, mapping) = countries();
                let bindings = binds(&[("X", "president"), ("Y", &name), ("E", "Arendia")]);
                let (_, sql) = instantiate_pattern(&pattern(PatternKind::TenureDuration), &bindings, &SchemaBindings::from_mapping(&mapping)).unwrap();
                let safe = SafeSql::check(&sql, &Catalog::from_schema(&schema)).unwrap();
                prop_assert!(execute_query(&db, &safe, DEFAULT_TIMEOUT).is_ok());
            }
        }
    }
}

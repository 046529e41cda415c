//! Executing queries, scoring answers, labelling failures, and reporting.
//!
//! Answers are compared after SQuAD-style normalization: lower case, no
//! punctuation, no articles, whitespace-split. Absolute scores depend on
//! that choice.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::sync::mpsc;
use std::time::Duration;

use rusqlite::types::Value as SqlValue;
use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};

use crate::ingest;
use crate::schema::RelationalSchema;
use crate::sqlgen::{GeneratedQuery, SafeSql, UNKNOWN_TABLE};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("open {path}: {source}")]
    Open { path: String, source: rusqlite::Error },
    #[error("classify_error needs a failed record; {0:?} matched")]
    NotAFailure(String),
    #[error("nothing to aggregate")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExecError {
    /// The engine's message, verbatim.
    #[error("{0}")]
    Sql(String),
    #[error("query exceeded {0:?}")]
    Timeout(Duration),
}

/// A connection that cannot write.
pub struct ReadOnlyDb {
    conn: Connection,
}

impl ReadOnlyDb {
    pub fn open(path: &Path) -> Result<Self, EvalError> {
        let open = || -> rusqlite::Result<Connection> {
            let conn = Connection::open_with_flags(path, OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX)?;
            conn.pragma_update(None, "query_only", true)?;
            Ok(conn)
        };
        open().map(|conn| Self { conn }).map_err(|source| EvalError::Open { path: path.display().to_string(), source })
    }

    /// Bypasses the safety check; for tests of the read-only wall itself.
    #[doc(hidden)]
    pub fn raw(&self) -> &Connection {
        &self.conn
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultSet {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<SqlValue>>,
}

/// Runs a checked query, interrupting it after `timeout`.
pub fn execute_query(db: &ReadOnlyDb, sql: &SafeSql, timeout: Duration) -> Result<ResultSet, ExecError> {
    let handle = db.conn.get_interrupt_handle();
    let (done, wait) = mpsc::channel::<()>();
    let watchdog = std::thread::spawn(move || {
        if let Err(mpsc::RecvTimeoutError::Timeout) = wait.recv_timeout(timeout) {
            handle.interrupt();
            true
        } else {
            false
        }
    });
    let run = || -> rusqlite::Result<ResultSet> {
        let mut stmt = db.conn.prepare(sql.as_str())?;
        let columns: Vec<String> = stmt.column_names().iter().map(|c| c.to_string()).collect();
        let n = columns.len();
        let rows = stmt
            .query_map([], |r| (0..n).map(|i| r.get::<_, SqlValue>(i)).collect::<rusqlite::Result<Vec<_>>>())?
            .collect::<rusqlite::Result<Vec<_>>>()?;
        Ok(ResultSet { columns, rows })
    };
    let result = run();
    let _ = done.send(());
    let fired = watchdog.join().unwrap_or(false);
    match result {
        Ok(r) => Ok(r),
        Err(_) if fired => Err(ExecError::Timeout(timeout)),
        Err(rusqlite::Error::SqliteFailure(_, Some(msg))) => Err(ExecError::Sql(msg)),
        Err(rusqlite::Error::SqlInputError { msg, .. }) => Err(ExecError::Sql(msg)),
        Err(e) => Err(ExecError::Sql(e.to_string())),
    }
}

/// Shortest decimal text that reads back as `f`; integral values lose the `.0`.
pub fn render_real(f: f64) -> String {
    if f.is_finite() && f.fract() == 0.0 && f.abs() < 1e15 {
        format!("{}", f as i64)
    } else {
        format!("{f}")
    }
}

pub fn render_value(v: &SqlValue) -> String {
    match v {
        SqlValue::Null => String::new(),
        SqlValue::Integer(i) => i.to_string(),
        SqlValue::Real(f) => render_real(*f),
        SqlValue::Text(s) => s.clone(),
        SqlValue::Blob(b) => hex::encode(b),
    }
}

/// Cells of a row joined by a space, rows joined by `", "`, in result order.
pub fn render_answer(rs: &ResultSet) -> String {
    rs.rows
        .iter()
        .map(|row| row.iter().map(render_value).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join(", ")
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || matches!(c, '\u{2018}' | '\u{2019}' | '\u{201c}' | '\u{201d}' | '\u{2013}' | '\u{2014}' | '\u{2026}')
}

pub fn normalize_answer(text: &str) -> Vec<String> {
    let lowered: String = text.to_lowercase().chars().filter(|c| !is_punct(*c)).collect();
    lowered.split_whitespace().filter(|t| !matches!(*t, "a" | "an" | "the")).map(str::to_string).collect()
}

pub fn exact_match(expected: &str, predicted: &str) -> u8 {
    (normalize_answer(expected) == normalize_answer(predicted)) as u8
}

fn f_measure(overlap: usize, pred_len: usize, ref_len: usize) -> f64 {
    if pred_len == 0 && ref_len == 0 {
        return 1.0;
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / pred_len as f64;
    let r = overlap as f64 / ref_len as f64;
    2.0 * p * r / (p + r)
}

fn unigram_f(expected: &[String], predicted: &[String]) -> f64 {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in expected {
        *counts.entry(t).or_insert(0) += 1;
    }
    let mut overlap = 0;
    for t in predicted {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    f_measure(overlap, predicted.len(), expected.len())
}

/// Harmonic mean of precision and recall over the token multisets.
pub fn token_f1(expected: &str, predicted: &str) -> f64 {
    unigram_f(&normalize_answer(expected), &normalize_answer(predicted))
}

/// Unigram-overlap F-measure. On single answers this coincides with
/// [`token_f1`]; both are kept because reports name both.
pub fn rouge1(expected: &str, predicted: &str) -> f64 {
    unigram_f(&normalize_answer(expected), &normalize_answer(predicted))
}

pub(crate) fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Longest-common-subsequence F-measure over normalized tokens.
pub fn rouge_l(expected: &str, predicted: &str) -> f64 {
    let (e, p) = (normalize_answer(expected), normalize_answer(predicted));
    f_measure(lcs_len(&e, &p), p.len(), e.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub em: u8,
    pub f1: f64,
    pub rouge1: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
}

impl Scores {
    pub const ZERO: Scores = Scores { em: 0, f1: 0.0, rouge1: 0.0, rouge_l: 0.0 };

    /// A missing prediction scores zero everywhere.
    pub fn compute(expected: &str, predicted: Option<&str>) -> Self {
        match predicted {
            None => Self::ZERO,
            Some(p) => Self {
                em: exact_match(expected, p),
                f1: token_f1(expected, p),
                rouge1: rouge1(expected, p),
                rouge_l: rouge_l(expected, p),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueGroup {
    DataQuality,
    SqlGeneration,
    SchemaGeneration,
}

impl IssueGroup {
    pub fn label(self) -> &'static str {
        match self {
            IssueGroup::DataQuality => "Data Quality",
            IssueGroup::SqlGeneration => "SQL Generation",
            IssueGroup::SchemaGeneration => "Schema Generation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ErrorCategory {
    #[serde(rename = "Wrong Calculations")]
    WrongCalculations,
    #[serde(rename = "Empty Results")]
    EmptyResults,
    #[serde(rename = "Wrong Entity Mapping")]
    WrongEntityMapping,
    #[serde(rename = "Precision/Format Issues")]
    PrecisionFormat,
    #[serde(rename = "Aggregate Function Misuse")]
    AggregateMisuse,
    #[serde(rename = "Syntax Errors")]
    SyntaxErrors,
    #[serde(rename = "Schema Column Errors")]
    SchemaColumnErrors,
    #[serde(rename = "Non-SQL Responses")]
    NonSqlResponses,
    #[serde(rename = "Missing Data Handling")]
    MissingDataHandling,
    #[serde(rename = "Schema Misunderstanding")]
    SchemaMisunderstanding,
}

impl ErrorCategory {
    pub const ALL: [ErrorCategory; 10] = [
        ErrorCategory::WrongCalculations,
        ErrorCategory::EmptyResults,
        ErrorCategory::WrongEntityMapping,
        ErrorCategory::PrecisionFormat,
        ErrorCategory::AggregateMisuse,
        ErrorCategory::SyntaxErrors,
        ErrorCategory::SchemaColumnErrors,
        ErrorCategory::NonSqlResponses,
        ErrorCategory::MissingDataHandling,
        ErrorCategory::SchemaMisunderstanding,
    ];

    pub fn group(self) -> IssueGroup {
        use ErrorCategory::*;
        match self {
            WrongCalculations | EmptyResults | WrongEntityMapping | PrecisionFormat => IssueGroup::DataQuality,
            AggregateMisuse | SyntaxErrors | SchemaColumnErrors | NonSqlResponses => IssueGroup::SqlGeneration,
            MissingDataHandling | SchemaMisunderstanding => IssueGroup::SchemaGeneration,
        }
    }

    pub fn label(self) -> &'static str {
        use ErrorCategory::*;
        match self {
            WrongCalculations => "Wrong Calculations",
            EmptyResults => "Empty Results",
            WrongEntityMapping => "Wrong Entity Mapping",
            PrecisionFormat => "Precision/Format Issues",
            AggregateMisuse => "Aggregate Function Misuse",
            SyntaxErrors => "Syntax Errors",
            SchemaColumnErrors => "Schema Column Errors",
            NonSqlResponses => "Non-SQL Responses",
            MissingDataHandling => "Missing Data Handling",
            SchemaMisunderstanding => "Schema Misunderstanding",
        }
    }
}

impl fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub domain: String,
    pub schema_model: String,
    pub query_model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    pub question: String,
    pub expected: String,
    pub predicted: Option<String>,
    pub exec_error: Option<String>,
    #[serde(flatten)]
    pub scores: Scores,
    pub error_label: Option<ErrorCategory>,
}

/// One results line: the scored record, the query behind it, and lint output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultLine {
    pub record: EvalRecord,
    pub query: GeneratedQuery,
    pub lint_warnings: Vec<String>,
}

/// What the classifier knows about the schema.
#[derive(Debug, Clone, Default)]
pub struct SchemaColumns(BTreeSet<String>);

impl SchemaColumns {
    pub fn from_schema(schema: &RelationalSchema) -> Self {
        Self(schema.tables.iter().flat_map(|t| t.columns.iter().map(|c| c.name.to_lowercase())).collect())
    }

    /// A snake_case field the question names that the schema lacks.
    pub fn missing_in(&self, question: &str) -> Option<String> {
        regex!(r"\b[A-Za-z][A-Za-z0-9]*(?:_[A-Za-z0-9]+)+\b")
            .find_iter(question)
            .map(|m| m.as_str().to_lowercase())
            .find(|c| !self.0.contains(c))
    }
}

fn as_number(s: &str) -> Option<(f64, usize)> {
    let t: String = s.trim().chars().filter(|c| *c != ',' && !c.is_whitespace()).collect();
    let v: f64 = t.parse().ok()?;
    let decimals = t.split_once('.').map_or(0, |(_, d)| d.len());
    v.is_finite().then_some((v, decimals))
}

/// Rule cascade over a failed record. The first matching rule wins.
pub fn classify_error(
    record: &EvalRecord,
    query: &GeneratedQuery,
    lint_warnings: &[String],
    columns: &SchemaColumns,
) -> Result<ErrorCategory, EvalError> {
    use ErrorCategory::*;
    if record.scores.em == 1 {
        return Err(EvalError::NotAFailure(record.question.clone()));
    }
    if !query.extraction_ok {
        return Ok(NonSqlResponses);
    }
    let err = record.exec_error.as_deref().unwrap_or("").to_lowercase();
    if query.safety_reasons.iter().any(|r| r.starts_with(UNKNOWN_TABLE)) || err.contains("no such table") {
        return Ok(SchemaMisunderstanding);
    }
    if err.contains("no such column") {
        return Ok(SchemaColumnErrors);
    }
    if !err.is_empty() || !query.safety_ok {
        return Ok(SyntaxErrors);
    }
    if !lint_warnings.is_empty() {
        return Ok(AggregateMisuse);
    }
    let predicted = record.predicted.as_deref().unwrap_or("");
    if normalize_answer(predicted).is_empty() {
        return Ok(EmptyResults);
    }
    if let (Some((e, de)), Some((p, dp))) = (as_number(&record.expected), as_number(predicted)) {
        let scale = 10f64.powi(de.min(dp) as i32);
        return Ok(if (e * scale).round() == (p * scale).round() { PrecisionFormat } else { WrongCalculations });
    }
    let (de, dp) = (ingest::normalize_date(&record.expected), ingest::normalize_date(predicted));
    if !de.is_null() && de.value == dp.value {
        return Ok(PrecisionFormat);
    }
    if columns.missing_in(&record.question).is_some() {
        return Ok(MissingDataHandling);
    }
    Ok(WrongEntityMapping)
}

/// Executes (when safe), scores and labels one generated query.
pub fn evaluate(
    expected: &str,
    query: &GeneratedQuery,
    db: &ReadOnlyDb,
    catalog: &crate::sqlgen::Catalog,
    timeout: Duration,
) -> (Option<String>, Option<String>, Scores, Vec<String>) {
    let lint = query.sql.as_deref().map(crate::sqlgen::lint_aggregates);
    let lint_warnings = lint.map(|l| l.warnings().to_vec()).unwrap_or_default();
    let (predicted, exec_error) = match query.safe_sql(catalog) {
        Some(sql) => match execute_query(db, &sql, timeout) {
            Ok(rs) => (Some(render_answer(&rs)), None),
            Err(e) => (None, Some(e.to_string())),
        },
        None => (None, None),
    };
    let scores = Scores::compute(expected, predicted.as_deref());
    (predicted, exec_error, scores, lint_warnings)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub domain: String,
    pub schema_model: String,
    pub query_model: String,
    pub n: usize,
    pub mean_em: f64,
    pub mean_f1: f64,
    pub mean_rouge1: f64,
    #[serde(rename = "mean_rougeL")]
    pub mean_rouge_l: f64,
}

pub const ALL_DOMAINS: &str = "all";

/// Means × 100 per (domain, schema model, query model), plus one row per
/// model pair over every domain, labelled [`ALL_DOMAINS`].
pub fn aggregate(records: &[EvalRecord]) -> Result<Vec<RunReport>, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut groups: BTreeMap<(String, String, String), Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        let key = (r.schema_model.clone(), r.query_model.clone());
        groups.entry((r.domain.clone(), key.0.clone(), key.1.clone())).or_default().push(r);
        groups.entry((ALL_DOMAINS.to_string(), key.0, key.1)).or_default().push(r);
    }
    Ok(groups
        .into_iter()
        .map(|((domain, schema_model, query_model), rs)| {
            let n = rs.len();
            let mean = |f: &dyn Fn(&EvalRecord) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n as f64 * 100.0;
            RunReport {
                domain,
                schema_model,
                query_model,
                n,
                mean_em: mean(&|r| r.scores.em as f64),
                mean_f1: mean(&|r| r.scores.f1),
                mean_rouge1: mean(&|r| r.scores.rouge1),
                mean_rouge_l: mean(&|r| r.scores.rouge_l),
            }
        })
        .collect())
}

/// Query models down, schema models across, `EM / F1` per cell, over all
/// domains.
pub fn render_grid(reports: &[RunReport]) -> String {
    let overall: Vec<&RunReport> = reports.iter().filter(|r| r.domain == ALL_DOMAINS).collect();
    let schemas: BTreeSet<&str> = overall.iter().map(|r| r.schema_model.as_str()).collect();
    let queries: BTreeSet<&str> = overall.iter().map(|r| r.query_model.as_str()).collect();
    let mut out = String::from("| Query model |");
    for s in &schemas {
        out.push_str(&format!(" {s} (EM / F1) |"));
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(schemas.len()));
    out.push('\n');
    for q in &queries {
        out.push_str(&format!("| {q} |"));
        for s in &schemas {
            match overall.iter().find(|r| r.schema_model == *s && r.query_model == *q) {
                Some(r) => out.push_str(&format!(" {:.2} / {:.2} |", r.mean_em, r.mean_f1)),
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    out
}

/// Per-domain tables of all four metrics.
pub fn render_domain_tables(reports: &[RunReport]) -> String {
    let mut out = String::new();
    let domains: BTreeSet<&str> = reports.iter().filter(|r| r.domain != ALL_DOMAINS).map(|r| r.domain.as_str()).collect();
    for d in domains {
        out.push_str(&format!("### {d}\n\n| Schema model | Query model | n | EM | F1 | Rouge-1 | Rouge-L |\n|---|---|---|---|---|---|---|\n"));
        for r in reports.iter().filter(|r| r.domain == d) {
            out.push_str(&format!(
                "| {} | {} | {} | {:.2} | {:.2} | {:.2} | {:.2} |\n",
                r.schema_model, r.query_model, r.n, r.mean_em, r.mean_f1, r.mean_rouge1, r.mean_rouge_l
            ));
        }
        out.push('\n');
    }
    out
}

pub fn render_markdown(reports: &[RunReport]) -> String {
    format!("# Results\n\n## Overall\n\n{}\n## By domain\n\n{}", render_grid(reports), render_domain_tables(reports))
}

pub fn render_csv(reports: &[RunReport]) -> String {
    let mut out = String::from("domain,schema_model,query_model,n,mean_em,mean_f1,mean_rouge1,mean_rougeL\n");
    let esc = |s: &str| if s.contains([',', '"', '\n']) { format!("\"{}\"", s.replace('"', "\"\"")) } else { s.to_string() };
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{:.2},{:.2},{:.2},{:.2}\n",
            esc(&r.domain),
            esc(&r.schema_model),
            esc(&r.query_model),
            r.n,
            r.mean_em,
            r.mean_f1,
            r.mean_rouge1,
            r.mean_rouge_l
        ));
    }
    out
}

/// Counts per category, in taxonomy order, zero rows omitted.
pub fn error_table(records: &[EvalRecord]) -> Vec<(ErrorCategory, usize)> {
    let mut counts: BTreeMap<ErrorCategory, usize> = BTreeMap::new();
    for r in records {
        if let Some(c) = r.error_label {
            *counts.entry(c).or_insert(0) += 1;
        }
    }
    ErrorCategory::ALL.iter().filter_map(|c| counts.get(c).map(|n| (*c, *n))).collect()
}

pub fn render_error_table(rows: &[(ErrorCategory, usize)]) -> String {
    let mut out = String::from("| Issue | Error Category | Count |\n|---|---|---|\n");
    for (c, n) in rows {
        out.push_str(&format!("| {} | {} | {} |\n", c.group().label(), c.label(), n));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sqlgen::Catalog;

    fn record(expected: &str, predicted: Option<&str>, exec_error: Option<&str>) -> EvalRecord {
        EvalRecord {
            domain: "d".into(),
            schema_model: "s".into(),
            query_model: "q".into(),
            pattern: None,
            question: "Who?".into(),
            expected: expected.into(),
            predicted: predicted.map(str::to_string),
            exec_error: exec_error.map(str::to_string),
            scores: Scores::compute(expected, predicted),
            error_label: None,
        }
    }

    fn query(response: &str, catalog: &Catalog) -> GeneratedQuery {
        GeneratedQuery::from_response("Who?", response, catalog)
    }

    #[test]
    fn rendering() {
        let rs = |rows: Vec<Vec<SqlValue>>| ResultSet { columns: vec![], rows };
        assert_eq!(render_answer(&rs(vec![vec![SqlValue::Integer(2012)]])), "2012");
        assert_eq!(render_answer(&rs(vec![vec![SqlValue::Text("Elizabeth II".into())]])), "Elizabeth II");
        assert_eq!(render_answer(&rs(vec![vec![SqlValue::Real(1.0)]])), "1");
        assert_eq!(exact_match("1", &render_answer(&rs(vec![vec![SqlValue::Real(1.0)]]))), 1);
        assert_eq!(render_answer(&rs(vec![vec![SqlValue::Real(0.25)]])), "0.25");
        assert_eq!(
            render_answer(&rs(vec![vec![SqlValue::Text("a".into()), SqlValue::Integer(1)], vec![SqlValue::Text("b".into()), SqlValue::Null]])),
            "a 1, b "
        );
        assert_eq!(render_answer(&rs(vec![])), "");
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_answer("Elizabeth II"), ["elizabeth", "ii"]);
        assert_eq!(normalize_answer("The Gold Medal."), ["gold", "medal"]);
        assert_eq!(normalize_answer("1,148 days"), ["1148", "days"]);
        assert_eq!(normalize_answer("  O'Brien  "), ["obrien"]);
    }

    #[test]
    fn metric_examples() {
        assert_eq!((exact_match("2012", "2016"), token_f1("2012", "2016")), (0, 0.0));
        let s = Scores::compute("gold medal", Some("gold medal"));
        assert_eq!((s.em, s.f1, s.rouge1, s.rouge_l), (1, 1.0, 1.0, 1.0));
        assert_eq!(token_f1("new delhi india", "india new delhi"), 1.0);
        // lcs([new delhi india], [india new delhi]) = 2, so F = 2/3
        assert!((rouge_l("new delhi india", "india new delhi") - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(Scores::compute("", Some("")).f1, 1.0);
        assert_eq!(Scores::compute("x", Some("")).rouge_l, 0.0);
        assert_eq!(Scores::compute("x", None), Scores::ZERO);
    }

    #[test]
    fn read_only_execution() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.sqlite");
        let c = Connection::open(&path).unwrap();
        c.execute_batch("CREATE TABLE T (y INTEGER, v REAL); INSERT INTO T VALUES (2012, 5.5), (2013, 1.25), (2014, 3.0); CREATE TABLE E (x);").unwrap();
        drop(c);
        let db = ReadOnlyDb::open(&path).unwrap();
        let cat = Catalog::from_schema(&crate::schema::parse_ddl("CREATE TABLE T (y INTEGER PRIMARY KEY, v REAL); CREATE TABLE E (x TEXT PRIMARY KEY);").unwrap());
        let q = |s: &str| SafeSql::check(s, &cat).unwrap();
        let low = execute_query(&db, &q("SELECT y FROM T ORDER BY v ASC LIMIT 1"), DEFAULT_TIMEOUT).unwrap();
        assert_eq!(render_answer(&low), "2013");
        match execute_query(&db, &q("SELECT FROM T WHERE"), DEFAULT_TIMEOUT) {
            Err(ExecError::Sql(m)) => assert!(m.contains("syntax error"), "{m}"),
            other => panic!("{other:?}"),
        }
        assert!(execute_query(&db, &q("SELECT * FROM E"), DEFAULT_TIMEOUT).unwrap().rows.is_empty());
        // the second wall: the handle itself refuses writes
        assert!(db.raw().execute_batch("DROP TABLE T").is_err());
        assert_eq!(render_answer(&execute_query(&db, &q("SELECT COUNT(*) FROM T"), DEFAULT_TIMEOUT).unwrap()), "3");
    }

    #[test]
    fn runaway_query_times_out() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.sqlite");
        Connection::open(&path).unwrap().execute_batch("CREATE TABLE T (x);").unwrap();
        let db = ReadOnlyDb::open(&path).unwrap();
        let cat = Catalog::default();
        let sql = SafeSql::check(
            "WITH RECURSIVE c(i) AS (SELECT 1 UNION ALL SELECT i + 1 FROM c) SELECT COUNT(*) FROM c",
            &cat,
        )
        .unwrap();
        let started = std::time::Instant::now();
        assert_eq!(execute_query(&db, &sql, Duration::from_millis(100)), Err(ExecError::Timeout(Duration::from_millis(100))));
        assert!(started.elapsed() < Duration::from_secs(5));
    }

    #[test]
    fn taxonomy_cascade() {
        let schema = crate::schema::parse_ddl(include_str!("../fixtures/schemas/flash/countries.sql")).unwrap();
        let cat = Catalog::from_schema(&schema);
        let cols = SchemaColumns::from_schema(&schema);
        let ok_sql = "```sql\nSELECT leader_name FROM Leaders\n```";
        use ErrorCategory::*;
        let cases: Vec<(EvalRecord, GeneratedQuery, Vec<String>, ErrorCategory)> = vec![
            (record("2016", None, None), query("The answer is 2012", &cat), vec![], NonSqlResponses),
            (record("x", None, None), query("SELECT * FROM People", &cat), vec![], SchemaMisunderstanding),
            (record("x", None, Some("no such column: l.name")), query(ok_sql, &cat), vec![], SchemaColumnErrors),
            (record("x", None, Some("near \"FORM\": syntax error")), query(ok_sql, &cat), vec![], SyntaxErrors),
            (record("x", Some("y"), None), query(ok_sql, &cat), vec!["aggregate MIN() in ORDER BY without GROUP BY".into()], AggregateMisuse),
            (record("Elizabeth II", Some(""), None), query(ok_sql, &cat), vec![], EmptyResults),
            (record("1148", Some("1113"), None), query(ok_sql, &cat), vec![], WrongCalculations),
            (record("0.9", Some("0.87"), None), query(ok_sql, &cat), vec![], PrecisionFormat),
            (record("2016-01-01", Some("1 January 2016"), None), query(ok_sql, &cat), vec![], PrecisionFormat),
            (
                EvalRecord { question: "What was odi_ties_this_year in 2019?".into(), ..record("3", Some("none"), None) },
                query(ok_sql, &cat),
                vec![],
                MissingDataHandling,
            ),
            (record("Rohit Sharma", Some("Virat Kohli"), None), query(ok_sql, &cat), vec![], WrongEntityMapping),
        ];
        for (r, q, lint, want) in cases {
            assert_eq!(classify_error(&r, &q, &lint, &cols).unwrap(), want, "{r:?}");
        }
        let good = record("a", Some("a"), None);
        assert!(matches!(classify_error(&good, &query(ok_sql, &cat), &[], &cols), Err(EvalError::NotAFailure(_))));
    }

    #[test]
    fn categories_belong_to_their_groups() {
        let by_group = |g| ErrorCategory::ALL.iter().filter(|c| c.group() == g).count();
        assert_eq!(
            (by_group(IssueGroup::DataQuality), by_group(IssueGroup::SqlGeneration), by_group(IssueGroup::SchemaGeneration)),
            (4, 4, 2)
        );
        let labels: BTreeSet<&str> = ErrorCategory::ALL.iter().map(|c| c.label()).collect();
        assert_eq!(labels.len(), 10);
        for c in ErrorCategory::ALL {
            assert_eq!(serde_json::to_value(c).unwrap(), serde_json::Value::String(c.label().into()));
        }
    }

    #[test]
    fn aggregation() {
        let a = record("x", Some("x"), None);
        let b = record("x", Some("y"), None);
        let reports = aggregate(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(reports[0].mean_em, 50.0);
        assert!(matches!(aggregate(&[]), Err(EvalError::Empty)));

        let mut rs = Vec::new();
        for s in ["flash", "pro"] {
            for q in ["llama", "qwen"] {
                rs.push(EvalRecord { schema_model: s.into(), query_model: q.into(), ..a.clone() });
            }
        }
        let reports = aggregate(&rs).unwrap();
        let grid = render_grid(&reports);
        let cells = grid.lines().skip(2).map(|l| l.matches(" / ").count()).sum::<usize>();
        assert_eq!(cells, 4);
        assert!(render_csv(&reports).starts_with("domain,schema_model"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn tokens() -> impl Strategy<Value = Vec<String>> {
            prop::collection::vec("[a-e]", 0..12)
        }

        /// Exhaustive LCS: the longest subsequence of `a` that is also one of `b`.
        fn brute_lcs(a: &[String], b: &[String]) -> usize {
            let mut best = 0;
            for mask in 0u32..(1 << a.len()) {
                let sub: Vec<&String> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| &a[i]).collect();
                if sub.len() <= best {
                    continue;
                }
                let mut it = b.iter();
                if sub.iter().all(|x| it.any(|y| y == *x)) {
                    best = sub.len();
                }
            }
            best
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(256))]
            #[test]
            fn lcs_matches_brute_force(a in tokens(), b in tokens()) {
                prop_assert_eq!(lcs_len(&a, &b), brute_lcs(&a, &b));
            }

            #[test]
            fn metric_laws(a in tokens(), b in tokens()) {
                let (x, y) = (a.join(" "), b.join(" "));
                let s = Scores::compute(&x, Some(&y));
                for m in [s.f1, s.rouge1, s.rouge_l] {
                    prop_assert!((0.0..=1.0).contains(&m));
                }
                if s.em == 1 {
                    prop_assert_eq!((s.f1, s.rouge1, s.rouge_l), (1.0, 1.0, 1.0));
                }
                prop_assert_eq!(token_f1(&x, &y), token_f1(&y, &x));
                prop_assert_eq!(rouge1(&x, &y), rouge1(&y, &x));
                prop_assert!((rouge_l(&x, &y) - rouge_l(&y, &x)).abs() < 1e-12);
            }

            #[test]
            fn means_match_naive_recomputation(ems in prop::collection::vec((0u8..2, 0.0f64..1.0), 1..40)) {
                let rs: Vec<EvalRecord> = ems
                    .iter()
                    .map(|(em, f)| EvalRecord {
                        scores: Scores { em: *em, f1: *f, rouge1: *f, rouge_l: *f },
                        ..record("x", Some("x"), None)
                    })
                    .collect();
                let r = &aggregate(&rs).unwrap()[0];
                let naive_em: f64 = ems.iter().map(|(e, _)| *e as f64 * 100.0).sum::<f64>() / ems.len() as f64;
                let naive_f1: f64 = ems.iter().map(|(_, f)| f * 100.0).sum::<f64>() / ems.len() as f64;
                prop_assert!((r.mean_em - naive_em).abs() < 1e-9);
                prop_assert!((r.mean_f1 - naive_f1).abs() < 1e-9);
            }
        }
    }
}

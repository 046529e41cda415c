//! Turning a model response into one safe, read-only query.
//!
//! Safety here is lexical plus a catalog check; the database is also opened
//! read-only, so this is the first of two walls, not the only one.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::llmclient::{CompletionRequest, LlmClient, LlmError};
use crate::promptkit::PromptBundle;
use crate::schema::RelationalSchema;

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Tok {
    Word(String),
    /// A double-quoted, backticked or bracketed identifier, unquoted.
    Quoted(String),
    Str(String),
    Num(String),
    Punct(char),
}

impl Tok {
    fn is_kw(&self, kw: &str) -> bool {
        matches!(self, Tok::Word(w) if w.eq_ignore_ascii_case(kw))
    }

    fn ident(&self) -> Option<&str> {
        match self {
            Tok::Word(w) | Tok::Quoted(w) => Some(w),
            _ => None,
        }
    }
}

/// Comments dropped. `None` when a string, quote or comment is unterminated.
pub(crate) fn tokenize(sql: &str) -> Option<Vec<Tok>> {
    let cs: Vec<char> = sql.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    let until = |i: usize, close: char, doubled: bool| -> Option<(String, usize)> {
        let mut s = String::new();
        let mut j = i + 1;
        loop {
            let c = *cs.get(j)?;
            if c == close {
                if doubled && cs.get(j + 1) == Some(&close) {
                    s.push(c);
                    j += 2;
                    continue;
                }
                return Some((s, j + 1));
            }
            s.push(c);
            j += 1;
        }
    };
    while i < cs.len() {
        let c = cs[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '-' && cs.get(i + 1) == Some(&'-') {
            while i < cs.len() && cs[i] != '\n' {
                i += 1;
            }
        } else if c == '/' && cs.get(i + 1) == Some(&'*') {
            let end = (i + 2..cs.len().saturating_sub(1)).find(|&j| cs[j] == '*' && cs[j + 1] == '/')?;
            i = end + 2;
        } else if c == '\'' {
            let (s, j) = until(i, '\'', true)?;
            out.push(Tok::Str(s));
            i = j;
        } else if c == '"' || c == '`' {
            let (s, j) = until(i, c, true)?;
            out.push(Tok::Quoted(s));
            i = j;
        } else if c == '[' {
            let (s, j) = until(i, ']', false)?;
            out.push(Tok::Quoted(s));
            i = j;
        } else if c.is_ascii_digit() || (c == '.' && cs.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let start = i;
            while i < cs.len() && (cs[i].is_ascii_alphanumeric() || cs[i] == '.') {
                i += 1;
            }
            out.push(Tok::Num(cs[start..i].iter().collect()));
        } else if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < cs.len() && (cs[i].is_alphanumeric() || cs[i] == '_' || cs[i] == '$') {
                i += 1;
            }
            out.push(Tok::Word(cs[start..i].iter().collect()));
        } else {
            out.push(Tok::Punct(c));
            i += 1;
        }
    }
    Some(out)
}

/// Statements split at top-level semicolons, blank ones dropped.
fn split_statements(sql: &str) -> Vec<String> {
    let cs: Vec<char> = sql.chars().collect();
    let mut parts = Vec::new();
    let mut cur = String::new();
    let mut quote: Option<char> = None;
    let mut i = 0;
    while i < cs.len() {
        let c = cs[i];
        match quote {
            Some(q) => {
                cur.push(c);
                if c == q {
                    quote = None;
                }
            }
            None if c == '-' && cs.get(i + 1) == Some(&'-') => {
                while i < cs.len() && cs[i] != '\n' {
                    cur.push(cs[i]);
                    i += 1;
                }
                continue;
            }
            None if c == ';' => parts.push(std::mem::take(&mut cur)),
            None => {
                if matches!(c, '\'' | '"' | '`') {
                    quote = Some(c);
                } else if c == '[' {
                    quote = Some(']');
                }
                cur.push(c);
            }
        }
        i += 1;
    }
    parts.push(cur);
    parts
        .into_iter()
        .map(|p| p.trim().to_string())
        .filter(|p| tokenize(p).is_none_or(|t| !t.is_empty()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Extraction {
    pub sql: Option<String>,
    pub notes: Vec<String>,
}

/// The query in a model response: the first fenced block tagged `sql` or
/// holding a SELECT or WITH, else a statement starting a line with one of those words, else an
/// upper-case `SELECT` anywhere. Of several statements the first is kept.
pub fn extract_sql(response: &str) -> Extraction {
    let fence = regex!(r"(?s)```([A-Za-z0-9_-]*)[ \t]*\r?\n?(.*?)```");
    let starts = regex!(r"(?i)\b(SELECT|WITH)\b");
    let mut notes = Vec::new();
    let fenced = fence
        .captures_iter(response)
        .find(|c| c[1].to_ascii_lowercase().starts_with("sql") || starts.is_match(&c[2]))
        .map(|c| c[2].to_string());
    let body = match fenced {
        Some(b) => b,
        None => {
            let at_line = regex!(r"(?im)^[ \t]*(SELECT|WITH)\b");
            let upper = regex!(r"\b(SELECT|WITH)\b");
            let Some(m) = at_line.find(response).or_else(|| upper.find(response)) else {
                return Extraction { sql: None, notes: vec!["no SQL statement in response".into()] };
            };
            let rest = response[m.start()..].trim_start();
            // prose after a blank line is not part of the query
            let cut = regex!(r"\n[ \t]*\n").find(rest).map_or(rest.len(), |b| b.start());
            let rest = &rest[..cut];
            if cut < response[m.start()..].trim_start().len() {
                notes.push("trailing prose dropped".into());
            }
            rest.to_string()
        }
    };
    let body = body.replace("```", "");
    let statements = split_statements(&body);
    let Some(first) = statements.first() else {
        return Extraction { sql: None, notes: vec!["empty code block".into()] };
    };
    if statements.len() > 1 {
        notes.push(format!("response held {} statements; kept the first", statements.len()));
    }
    Extraction { sql: Some(first.clone()), notes }
}

/// Table names a query may read.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Catalog(BTreeSet<String>);

impl Catalog {
    pub fn from_schema(schema: &RelationalSchema) -> Self {
        Self(schema.tables.iter().map(|t| t.name.to_lowercase()).collect())
    }

    pub fn contains(&self, table: &str) -> bool {
        self.0.contains(&table.to_lowercase())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafetyVerdict {
    pub ok: bool,
    pub reasons: Vec<String>,
}

const DATA_WORDS: [&str; 3] = ["INSERT", "UPDATE", "DELETE"];
const SCHEMA_WORDS: [&str; 3] = ["DROP", "ALTER", "CREATE"];
const ADMIN_WORDS: [&str; 5] = ["ATTACH", "DETACH", "PRAGMA", "VACUUM", "REINDEX"];

pub const UNKNOWN_TABLE: &str = "unknown table";

pub fn check_safety(sql: &str, catalog: &Catalog) -> SafetyVerdict {
    let mut reasons = Vec::new();
    let statements = split_statements(sql);
    if statements.len() > 1 {
        reasons.push("multiple statements".to_string());
    }
    let Some(toks) = tokenize(sql) else {
        reasons.push("unterminated string, identifier or comment".into());
        return SafetyVerdict { ok: false, reasons };
    };
    if toks.is_empty() {
        reasons.push("empty query".into());
        return SafetyVerdict { ok: false, reasons };
    }
    let mut flagged = BTreeSet::new();
    for t in &toks {
        if let Tok::Word(w) = t {
            let up = w.to_ascii_uppercase();
            if DATA_WORDS.contains(&up.as_str()) && flagged.insert(up.clone()) {
                reasons.push(format!("data-modifying statement ({up})"));
            } else if SCHEMA_WORDS.contains(&up.as_str()) && flagged.insert(up.clone()) {
                reasons.push(format!("schema-modifying statement ({up})"));
            } else if ADMIN_WORDS.contains(&up.as_str()) && flagged.insert(up.clone()) {
                reasons.push(format!("database command ({up})"));
            }
        }
    }
    if !(toks[0].is_kw("SELECT") || toks[0].is_kw("WITH")) {
        reasons.push("not a SELECT query".into());
    }
    let ctes = cte_names(&toks);
    for table in referenced_tables(&toks) {
        if !catalog.contains(&table) && !ctes.contains(&table.to_lowercase()) {
            reasons.push(format!("{UNKNOWN_TABLE} {table}"));
        }
    }
    SafetyVerdict { ok: reasons.is_empty(), reasons }
}

/// Names introduced by `name [(cols)] AS (`.
fn cte_names(toks: &[Tok]) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for i in 0..toks.len() {
        let Some(name) = toks[i].ident() else { continue };
        let mut j = i + 1;
        if toks.get(j) == Some(&Tok::Punct('(')) {
            let mut depth = 0;
            while j < toks.len() {
                match toks[j] {
                    Tok::Punct('(') => depth += 1,
                    Tok::Punct(')') => {
                        depth -= 1;
                        if depth == 0 {
                            break;
                        }
                    }
                    _ => {}
                }
                j += 1;
            }
            j += 1;
        }
        if toks.get(j).is_some_and(|t| t.is_kw("AS")) && toks.get(j + 1) == Some(&Tok::Punct('(')) {
            out.insert(name.to_lowercase());
        }
    }
    out
}

/// Tables named after FROM or JOIN, including comma-separated lists.
fn referenced_tables(toks: &[Tok]) -> Vec<String> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < toks.len() {
        let from = toks[i].is_kw("FROM");
        if !(from || toks[i].is_kw("JOIN")) {
            i += 1;
            continue;
        }
        i += 1;
        while let Some(name) = toks.get(i).and_then(Tok::ident) {
            let mut name = name.to_string();
            i += 1;
            while toks.get(i) == Some(&Tok::Punct('.')) {
                match toks.get(i + 1).and_then(Tok::ident) {
                    Some(n) => name = n.to_string(),
                    None => break,
                }
                i += 2;
            }
            // a table-valued function, not a table
            if toks.get(i) != Some(&Tok::Punct('(')) {
                out.push(name);
            }
            if !from {
                break;
            }
            // optional alias, then a comma continues the list
            if toks.get(i).is_some_and(|t| t.is_kw("AS")) {
                i += 1;
            }
            if let Some(Tok::Word(w)) = toks.get(i) {
                if !is_clause_word(w) {
                    i += 1;
                }
            } else if let Some(Tok::Quoted(_)) = toks.get(i) {
                i += 1;
            }
            if toks.get(i) == Some(&Tok::Punct(',')) {
                i += 1;
            } else {
                break;
            }
        }
    }
    out
}

fn is_clause_word(w: &str) -> bool {
    const WORDS: [&str; 20] = [
        "WHERE", "JOIN", "INNER", "LEFT", "RIGHT", "FULL", "CROSS", "NATURAL", "OUTER", "ON", "USING", "GROUP", "ORDER",
        "LIMIT", "HAVING", "UNION", "EXCEPT", "INTERSECT", "WINDOW", "OFFSET",
    ];
    WORDS.iter().any(|k| k.eq_ignore_ascii_case(w))
}

/// SQL that passed [`check_safety`]; the only thing the executor accepts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SafeSql(String);

impl SafeSql {
    pub fn check(sql: &str, catalog: &Catalog) -> Result<Self, SafetyVerdict> {
        let v = check_safety(sql, catalog);
        if v.ok {
            Ok(Self(sql.trim().trim_end_matches(';').trim().to_string()))
        } else {
            Err(v)
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Lint {
    Warnings(Vec<String>),
    /// The query is outside the subset the lint understands.
    Skipped(String),
}

impl Lint {
    pub fn warnings(&self) -> &[String] {
        match self {
            Lint::Warnings(w) => w,
            Lint::Skipped(_) => &[],
        }
    }
}

const AGGREGATES: [&str; 5] = ["MIN", "MAX", "SUM", "AVG", "COUNT"];

/// Flags aggregate calls in the outer ORDER BY of a query without GROUP BY.
/// Aggregates inside subqueries or used as window functions do not count.
pub fn lint_aggregates(sql: &str) -> Lint {
    let Some(toks) = tokenize(sql) else { return Lint::Skipped("does not tokenize".into()) };
    let mut depth = 0i32;
    let mut depths = Vec::with_capacity(toks.len());
    for t in &toks {
        if *t == Tok::Punct('(') {
            depth += 1;
        }
        depths.push(depth);
        if *t == Tok::Punct(')') {
            depth -= 1;
            if depth < 0 {
                return Lint::Skipped("unbalanced parentheses".into());
            }
        }
    }
    if depth != 0 {
        return Lint::Skipped("unbalanced parentheses".into());
    }
    let top = |i: usize| depths[i] == 0 && toks[i] != Tok::Punct(')');
    let kw_pair = |i: usize, a: &str, b: &str| toks[i].is_kw(a) && toks.get(i + 1).is_some_and(|t| t.is_kw(b));
    let grouped = (0..toks.len()).any(|i| top(i) && kw_pair(i, "GROUP", "BY"));
    if grouped {
        return Lint::Warnings(vec![]);
    }
    let Some(order) = (0..toks.len()).rev().find(|&i| top(i) && kw_pair(i, "ORDER", "BY")) else {
        return Lint::Warnings(vec![]);
    };
    let end = (order + 2..toks.len()).find(|&i| top(i) && (toks[i].is_kw("LIMIT") || toks[i].is_kw("OFFSET"))).unwrap_or(toks.len());
    // depth of each open paren that starts a subquery
    let mut sub_depths: Vec<i32> = Vec::new();
    let mut found = None;
    for i in order + 2..end {
        sub_depths.retain(|&d| depths[i] >= d);
        if toks[i] == Tok::Punct('(') && toks.get(i + 1).is_some_and(|t| t.is_kw("SELECT") || t.is_kw("WITH")) {
            sub_depths.push(depths[i]);
            continue;
        }
        let Tok::Word(w) = &toks[i] else { continue };
        let up = w.to_ascii_uppercase();
        if !AGGREGATES.contains(&up.as_str()) || toks.get(i + 1) != Some(&Tok::Punct('(')) || !sub_depths.is_empty() {
            continue;
        }
        // skip window calls: MAX(x) OVER (...)
        let mut d = 0;
        let mut j = i + 1;
        while j < toks.len() {
            match toks[j] {
                Tok::Punct('(') => d += 1,
                Tok::Punct(')') => {
                    d -= 1;
                    if d == 0 {
                        break;
                    }
                }
                _ => {}
            }
            j += 1;
        }
        if toks.get(j + 1).is_some_and(|t| t.is_kw("OVER")) {
            continue;
        }
        found = Some(up);
        break;
    }
    Lint::Warnings(
        found.map(|f| format!("aggregate {f}() in ORDER BY without GROUP BY")).into_iter().collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedQuery {
    pub question: String,
    pub raw_response: String,
    pub sql: Option<String>,
    pub extraction_ok: bool,
    pub safety_ok: bool,
    pub safety_reasons: Vec<String>,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl GeneratedQuery {
    /// Extraction and safety verdicts for `response`.
    pub fn from_response(question: &str, response: &str, catalog: &Catalog) -> Self {
        let ex = extract_sql(response);
        let (safety_ok, safety_reasons) = match &ex.sql {
            Some(sql) => {
                let v = check_safety(sql, catalog);
                (v.ok, v.reasons)
            }
            None => (false, vec![]),
        };
        Self {
            question: question.to_string(),
            raw_response: response.to_string(),
            extraction_ok: ex.sql.is_some(),
            sql: ex.sql,
            safety_ok,
            safety_reasons,
            notes: ex.notes,
        }
    }

    pub fn safe_sql(&self, catalog: &Catalog) -> Option<SafeSql> {
        self.sql.as_deref().and_then(|s| SafeSql::check(s, catalog).ok())
    }
}

/// One model call: the domain prompt as system text, the question as user text.
pub fn generate_sql(question: &str, bundle: &PromptBundle, client: &LlmClient, model_id: &str) -> Result<GeneratedQuery, LlmError> {
    let prompt = bundle.assemble().map_err(|e| LlmError::InvalidRequest(e.to_string()))?;
    let reply = client.complete(&CompletionRequest::new(model_id, &prompt, question))?;
    Ok(GeneratedQuery::from_response(question, &reply.text, &bundle.catalog()))
}

//! The stages wired together over a run directory.
//!
//! Every artifact lives at `<run>/<domain>.<kind>` and is rewritten whole,
//! so rerunning a stage with the same inputs reproduces the same bytes.
//! `manifest.json` lists each artifact with its SHA-256.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::evalharness::{
    self, aggregate, classify_error, error_table, render_csv, render_markdown, EvalError, EvalRecord, ErrorCategory,
    ReadOnlyDb, ResultLine, RunReport, SchemaColumns,
};
use crate::ingest::{parse_timeline, Timeline};
use crate::llmclient::{LlmClient, LlmError};
use crate::populate::{
    create_database, populate_timeline, verify_integrity, Database, IntegrityViolation, LoadMapping, LoadOptions, LoadReport,
    PopulateError,
};
use crate::promptkit::{default_patterns, refine_gold_query, FewShotExample, PatternTemplate, PromptBundle, PromptError, FEW_SHOT_CEILING};
use crate::schema::{emit_ddl, parse_ddl, validate_3nf, NormalizationReport, RelationalSchema, SchemaError};
use crate::schemagen::{build_schema_prompt, derive_mapping, fallback_plan, generate_schema_llm, SchemaGenError};
use crate::sqlgen::generate_sql;

pub const MANIFEST: &str = "manifest.json";
const SAMPLE_ROWS: usize = 500;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    /// Bad arguments or missing inputs.
    #[error("{0}")]
    Input(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    SchemaGen(#[from] SchemaGenError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Populate(#[from] PopulateError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io { path: path.display().to_string(), message: e.to_string() }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("plain data serializes") + "\n"
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    items.iter().map(|i| serde_json::to_string(i).expect("plain data serializes") + "\n").collect()
}

/// File-name-safe rendering of a model label.
pub fn slug(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' }).collect()
}

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn artifact(&self, domain: &str, kind: &str) -> PathBuf {
        self.root.join(format!("{domain}.{kind}"))
    }

    fn require(&self, domain: &str, kind: &str, stage: &str) -> Result<PathBuf> {
        let p = self.artifact(domain, kind);
        if p.exists() {
            Ok(p)
        } else {
            Err(PipelineError::Input(format!("{} not found; run `{stage}` for {domain} first", p.display())))
        }
    }

    /// Rewrites `manifest.json`: relative path to SHA-256 for every file.
    pub fn write_manifest(&self) -> Result<BTreeMap<String, String>> {
        let mut entries = BTreeMap::new();
        let mut stack = vec![self.root.clone()];
        while let Some(dir) = stack.pop() {
            for e in fs::read_dir(&dir).map_err(|e| io_err(&dir, e))? {
                let path = e.map_err(|e| io_err(&dir, e))?.path();
                if path.is_dir() {
                    stack.push(path);
                    continue;
                }
                let rel = path.strip_prefix(&self.root).expect("under root").to_string_lossy().replace('\\', "/");
                if rel == MANIFEST || rel.ends_with("-journal") {
                    continue;
                }
                let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
                entries.insert(rel, hex::encode(Sha256::digest(&bytes)));
            }
        }
        write(&self.root.join(MANIFEST), &to_json(&entries))?;
        Ok(entries)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusFailure {
    pub file: String,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub domain: String,
    /// (file name, timeline), by file name.
    pub timelines: Vec<(String, Timeline)>,
    pub failures: Vec<CorpusFailure>,
}

impl Corpus {
    pub fn timelines(&self) -> Vec<Timeline> {
        self.timelines.iter().map(|(_, t)| t.clone()).collect()
    }
}

/// Reads `<root>/<domain>/*.json`. Unreadable files are listed, not fatal.
pub fn load_corpus(root: &Path, domain: &str) -> Result<Corpus> {
    let dir = root.join(domain);
    if !dir.is_dir() {
        return Err(PipelineError::Input(format!("no corpus directory for domain {domain:?} at {}", dir.display())));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| io_err(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    let mut corpus = Corpus { domain: domain.to_string(), timelines: vec![], failures: vec![] };
    for f in files {
        let name = f.file_name().expect("file").to_string_lossy().into_owned();
        let parsed = fs::read(&f).map_err(|e| e.to_string()).and_then(|b| parse_timeline(&b).map_err(|e| e.to_string()));
        match parsed {
            Ok(t) => corpus.timelines.push((name, t)),
            Err(error) => corpus.failures.push(CorpusFailure { file: name, error }),
        }
    }
    if corpus.timelines.is_empty() {
        return Err(PipelineError::Input(format!("no readable timelines in {}", dir.display())));
    }
    Ok(corpus)
}

pub enum SchemaBackend<'a> {
    Fallback,
    Llm { client: &'a LlmClient, model_id: &'a str },
}

/// Which generator produced a domain's schema; labels result rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaMeta {
    pub domain: String,
    pub schema_model: String,
    pub examples: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SchemaOutcome {
    pub schema: RelationalSchema,
    pub mapping: LoadMapping,
    pub report: NormalizationReport,
}

/// Loads every timeline into a scratch database to give the normal-form
/// check real rows. Returns `None` if the load itself fails.
fn sample_rows(schema: &RelationalSchema, mapping: &LoadMapping, timelines: &[Timeline]) -> Option<crate::schema::Samples> {
    let db = Database::in_memory(schema).ok()?;
    for t in timelines {
        populate_timeline(&db, schema, t, mapping, &LoadOptions::default()).ok()?;
    }
    db.sample_rows(schema, SAMPLE_ROWS).ok()
}

/// Generates, checks and writes `<domain>.schema.sql`, `.mapping.json`,
/// `.normalization.json` and `.schema.meta.json`.
pub fn stage_schema(run: &RunDir, corpus: &Corpus, backend: SchemaBackend<'_>) -> Result<SchemaOutcome> {
    let domain = &corpus.domain;
    let all = corpus.timelines();
    let (schema, mapping, meta) = match backend {
        SchemaBackend::Fallback => {
            let (schema, mapping) = fallback_plan(&all, domain)?;
            let examples = corpus.timelines.iter().map(|(f, _)| f.clone()).collect();
            (schema, mapping, SchemaMeta { domain: domain.clone(), schema_model: "fallback".into(), examples })
        }
        SchemaBackend::Llm { client, model_id } => {
            if all.len() < 2 {
                return Err(PipelineError::Input(format!("{domain}: schema generation needs at least 2 timelines")));
            }
            let n = all.len().min(3);
            let prompt = build_schema_prompt(&all[..n], domain)?;
            let generated = generate_schema_llm(&prompt, client, model_id, domain)?;
            write(&run.artifact(domain, "schema.response.txt"), &generated.raw_response)?;
            let mapping = derive_mapping(&generated.schema, &all)?;
            let examples = corpus.timelines[..n].iter().map(|(f, _)| f.clone()).collect();
            (generated.schema, mapping, SchemaMeta { domain: domain.clone(), schema_model: model_id.into(), examples })
        }
    };
    let samples = sample_rows(&schema, &mapping, &all);
    let report = validate_3nf(&schema, samples.as_ref());
    write(&run.artifact(domain, "schema.sql"), &emit_ddl(&schema)?)?;
    write(&run.artifact(domain, "mapping.json"), &to_json(&mapping))?;
    write(&run.artifact(domain, "normalization.json"), &to_json(&report))?;
    write(&run.artifact(domain, "schema.meta.json"), &to_json(&meta))?;
    Ok(SchemaOutcome { schema, mapping, report })
}

/// The schema and mapping a previous `schema` stage wrote.
pub fn load_schema(run: &RunDir, domain: &str) -> Result<(RelationalSchema, LoadMapping, SchemaMeta)> {
    let mut schema = parse_ddl(&read(&run.require(domain, "schema.sql", "schema")?)?)?;
    schema.domain = domain.to_string();
    let mapping_path = run.require(domain, "mapping.json", "schema")?;
    let mapping: LoadMapping = serde_json::from_str(&read(&mapping_path)?).map_err(|e| io_err(&mapping_path, e))?;
    let meta_path = run.require(domain, "schema.meta.json", "schema")?;
    let meta: SchemaMeta = serde_json::from_str(&read(&meta_path)?).map_err(|e| io_err(&meta_path, e))?;
    Ok((schema, mapping, meta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulateOutcome {
    pub domain: String,
    pub reports: Vec<LoadReport>,
    pub failures: Vec<CorpusFailure>,
    pub integrity: Vec<IntegrityViolation>,
    pub row_counts: BTreeMap<String, usize>,
}

/// Builds `<domain>.sqlite` and writes `<domain>.load.json`. A timeline that
/// fails to load is rolled back and listed; the rest still load.
pub fn stage_populate(run: &RunDir, corpus: &Corpus, force: bool) -> Result<PopulateOutcome> {
    let domain = &corpus.domain;
    let (schema, mapping, _) = load_schema(run, domain)?;
    mapping.check(&schema)?;
    let db = create_database(&schema, &run.artifact(domain, "sqlite"), force)?;
    let mut out = PopulateOutcome {
        domain: domain.clone(),
        reports: vec![],
        failures: corpus.failures.clone(),
        integrity: vec![],
        row_counts: BTreeMap::new(),
    };
    for (file, t) in &corpus.timelines {
        match populate_timeline(&db, &schema, t, &mapping, &LoadOptions::default()) {
            Ok(r) => out.reports.push(r),
            Err(e) => out.failures.push(CorpusFailure { file: file.clone(), error: e.to_string() }),
        }
    }
    out.integrity = verify_integrity(&db, &schema)?;
    for t in &schema.tables {
        out.row_counts.insert(t.name.clone(), db.row_count(&t.name)?);
    }
    drop(db);
    write(&run.artifact(domain, "load.json"), &to_json(&out))?;
    Ok(out)
}

/// One line of a question file. Extra keys are kept for reference only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionItem {
    pub question: String,
    pub expected: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
}

pub fn load_questions(path: &Path) -> Result<Vec<QuestionItem>> {
    let text = read(path)?;
    let mut out = vec![];
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let q = serde_json::from_str(line)
            .map_err(|e| PipelineError::Input(format!("{}:{}: malformed question line: {e}", path.display(), i + 1)))?;
        out.push(q);
    }
    Ok(out)
}

/// Maps `f` over `items` on up to `jobs` threads, each with its own state
/// from `init`. Output order follows input order.
fn par_map<T, S, R, I, F>(items: &[T], jobs: usize, init: I, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    I: Fn() -> Result<S> + Sync,
    F: Fn(&mut S, &T) -> Result<R> + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    let workers = jobs.clamp(1, items.len().max(1));
    std::thread::scope(|scope| -> Result<()> {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| -> Result<()> {
                    let mut state = init()?;
                    loop {
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        if i >= items.len() {
                            return Ok(());
                        }
                        let r = f(&mut state, &items[i]);
                        slots.lock().expect("results lock")[i] = Some(r);
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().expect("worker panicked")?;
        }
        Ok(())
    })?;
    slots.into_inner().expect("results lock").into_iter().map(|r| r.expect("every item visited")).collect()
}

fn open_read_only(run: &RunDir, domain: &str, stage: &str) -> Result<PathBuf> {
    run.require(domain, "sqlite", stage)
}

#[derive(Debug, Clone)]
pub struct GoldOptions<'a> {
    pub model_id: &'a str,
    pub max_iters: usize,
    pub jobs: usize,
    pub timeout: Duration,
    pub patterns: Option<Vec<PatternTemplate>>,
}

#[derive(Debug, Clone)]
pub struct GoldOutcome {
    pub examples: Vec<FewShotExample>,
    pub bundle: PromptBundle,
}

impl GoldOutcome {
    pub fn validated(&self) -> usize {
        self.examples.iter().filter(|e| e.validated).count()
    }
}

/// Refines a gold query per question, writes every attempt to
/// `<domain>.gold.jsonl`, and saves the prompt bundle with the validated
/// ones (at most the ceiling) under `<domain>.bundle/`.
pub fn stage_goldloop(
    run: &RunDir,
    domain: &str,
    questions: &[QuestionItem],
    client: &LlmClient,
    opts: &GoldOptions<'_>,
) -> Result<GoldOutcome> {
    let (schema, mapping, _) = load_schema(run, domain)?;
    let db_path = open_read_only(run, domain, "populate")?;
    let patterns = opts.patterns.clone().unwrap_or_else(default_patterns);
    let mut bundle = PromptBundle::new(&schema, Some(&mapping), &patterns)?;
    let examples = par_map(
        questions,
        opts.jobs,
        || Ok(ReadOnlyDb::open(&db_path)?),
        |db, q| Ok(refine_gold_query(&q.question, &q.expected, db, &bundle, client, opts.model_id, opts.max_iters, opts.timeout)?),
    )?;
    bundle.few_shot = examples.iter().filter(|e| e.validated).take(FEW_SHOT_CEILING).cloned().collect();
    write(&run.artifact(domain, "gold.jsonl"), &jsonl(&examples))?;
    bundle.save(&run.artifact(domain, "bundle"))?;
    Ok(GoldOutcome { examples, bundle })
}

#[derive(Debug, Clone)]
pub struct RunOptions<'a> {
    pub model_id: &'a str,
    pub jobs: usize,
    pub timeout: Duration,
    pub few_shot_floor: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub lines: Vec<ResultLine>,
    pub reports: Vec<RunReport>,
    pub results_path: PathBuf,
}

impl RunOutcome {
    /// Mean exact match × 100 over this run.
    pub fn mean_em(&self) -> f64 {
        self.reports.iter().find(|r| r.domain == evalharness::ALL_DOMAINS).map_or(0.0, |r| r.mean_em)
    }
}

/// Asks the model for SQL per question, executes, scores and labels.
/// Writes `<domain>.<model>.results.jsonl` and `.report.md` / `.report.csv`.
pub fn stage_run(run: &RunDir, domain: &str, questions: &[QuestionItem], client: &LlmClient, opts: &RunOptions<'_>) -> Result<RunOutcome> {
    if questions.is_empty() {
        return Err(PipelineError::Input("question file is empty".into()));
    }
    let (schema, _, meta) = load_schema(run, domain)?;
    let db_path = open_read_only(run, domain, "populate")?;
    let bundle_dir = run.artifact(domain, "bundle");
    if !bundle_dir.is_dir() {
        return Err(PipelineError::Input(format!("{} not found; run `goldloop` for {domain} first", bundle_dir.display())));
    }
    let bundle = PromptBundle::load(&bundle_dir)?.with_floor(opts.few_shot_floor);
    bundle.assemble()?;
    let catalog = bundle.catalog();
    let columns = SchemaColumns::from_schema(&schema);
    let lines = par_map(
        questions,
        opts.jobs,
        || Ok(ReadOnlyDb::open(&db_path)?),
        |db, q| {
            let query = generate_sql(&q.question, &bundle, client, opts.model_id)?;
            let (predicted, exec_error, scores, lint_warnings) = evalharness::evaluate(&q.expected, &query, db, &catalog, opts.timeout);
            let mut record = EvalRecord {
                domain: domain.to_string(),
                schema_model: meta.schema_model.clone(),
                query_model: opts.model_id.to_string(),
                pattern: q.pattern.clone(),
                question: q.question.clone(),
                expected: q.expected.clone(),
                predicted,
                exec_error,
                scores,
                error_label: None,
            };
            if record.scores.em == 0 {
                record.error_label = Some(classify_error(&record, &query, &lint_warnings, &columns)?);
            }
            Ok(ResultLine { record, query, lint_warnings })
        },
    )?;
    let records: Vec<EvalRecord> = lines.iter().map(|l| l.record.clone()).collect();
    let reports = aggregate(&records)?;
    let stem = format!("{}.results.jsonl", slug(opts.model_id));
    let results_path = run.artifact(domain, &stem);
    write(&results_path, &jsonl(&lines))?;
    let report_stem = |ext: &str| run.artifact(domain, &format!("{}.report.{ext}", slug(opts.model_id)));
    write(&report_stem("md"), &render_markdown(&reports))?;
    write(&report_stem("csv"), &render_csv(&reports))?;
    Ok(RunOutcome { lines, reports, results_path })
}

pub fn read_results(path: &Path) -> Result<Vec<ResultLine>> {
    let text = read(path)?;
    let mut out = vec![];
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(line)
                .map_err(|e| PipelineError::Input(format!("{}:{}: malformed results line: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ErrorsOutcome {
    pub rows: Vec<(ErrorCategory, usize)>,
    pub failures: Vec<ResultLine>,
}

/// Tallies the labels of failed rows across result files.
pub fn stage_errors(paths: &[PathBuf]) -> Result<ErrorsOutcome> {
    let mut lines = vec![];
    for p in paths {
        lines.extend(read_results(p)?);
    }
    let records: Vec<EvalRecord> = lines.iter().map(|l| l.record.clone()).collect();
    let failures = lines.into_iter().filter(|l| l.record.scores.em == 0).collect();
    Ok(ErrorsOutcome { rows: error_table(&records), failures })
}

/// Aggregates result files into `report.md` and `report.csv` under `out`.
pub fn stage_report(paths: &[PathBuf], out: &Path) -> Result<Vec<RunReport>> {
    let mut records = vec![];
    for p in paths {
        records.extend(read_results(p)?.into_iter().map(|l| l.record));
    }
    let reports = aggregate(&records)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write(&out.join("report.md"), &render_markdown(&reports))?;
    write(&out.join("report.csv"), &render_csv(&reports))?;
    Ok(reports)
}

/// Every `*.results.jsonl` directly under `dir`, by name.
pub fn results_in(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".results.jsonl"))
        .collect();
    v.sort();
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_keeps_order_and_propagates_errors() {
        let items: Vec<usize> = (0..50).collect();
        let out = par_map(&items, 4, || Ok(()), |_, i| Ok(i * 2)).unwrap();
        assert_eq!(out, items.iter().map(|i| i * 2).collect::<Vec<_>>());
        let err = par_map(&items, 3, || Ok(()), |_, i| if *i == 7 { Err(PipelineError::Input("seven".into())) } else { Ok(*i) });
        assert!(matches!(err, Err(PipelineError::Input(m)) if m == "seven"));
        assert!(par_map(&Vec::<usize>::new(), 4, || Ok(()), |_, i| Ok(*i)).unwrap().is_empty());
    }

    #[test]
    fn slugs() {
        assert_eq!(slug("gemini-2.0-flash"), "gemini-2.0-flash");
        assert_eq!(slug("org/model:8b"), "org_model_8b");
    }

    #[test]
    fn missing_domain_is_an_input_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_corpus(dir.path(), "nowhere"), Err(PipelineError::Input(_))));
    }
}

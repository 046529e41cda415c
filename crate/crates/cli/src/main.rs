//! `tempsql`: run the pipeline stages over a run directory.
//!
//! Exit status: 0 on success, 1 when a quality gate fails, 2 on bad usage or
//! input.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use tempsql::evalharness::render_error_table;
use tempsql::llmclient::{HttpTransport, LlmClient, RecordStore, Transport};
use tempsql::pipeline::{self, load_corpus, load_questions, RunDir, SchemaBackend};
use tempsql::promptkit::{default_patterns, load_patterns, PatternResponder, SchemaBindings, DEFAULT_FEW_SHOT_FLOOR, DEFAULT_MAX_ITERS};

/// Offline model name: answers questions that fit a pattern template.
const PATTERN_MODEL: &str = "pattern";

#[derive(Parser)]
#[command(name = "tempsql", version, about = "Temporal infobox timelines to SQLite, schema-guided text-to-SQL, and answer scoring")]
struct Cli {
    /// TOML file with paths, defaults and model profiles. Flags win over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Where artifacts go.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Worker threads for per-question stages.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Profile name from the config, a model id, or `pattern` for the
    /// offline template responder.
    #[arg(long)]
    model: Option<String>,
    /// Serve responses from this record file only; never call a model.
    #[arg(long, conflicts_with = "record")]
    replay: Option<PathBuf>,
    /// Append every live response to this record file.
    #[arg(long)]
    record: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Fallback,
    Llm,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and check a schema for a domain.
    Schema {
        #[arg(long)]
        domain: String,
        /// Directory holding `<domain>/*.json` timelines.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "fallback")]
        backend: Backend,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Build and load the domain database.
    Populate {
        #[arg(long)]
        domain: String,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Replace an existing database.
        #[arg(long)]
        force: bool,
    },
    /// Build execution-checked gold queries and the prompt bundle.
    Goldloop {
        #[arg(long)]
        domain: String,
        #[arg(long)]
        questions: PathBuf,
        #[arg(long)]
        max_iters: Option<usize>,
        /// Pattern templates to use instead of the built-in ones.
        #[arg(long)]
        patterns: Option<PathBuf>,
        #[arg(long)]
        few_shot_floor: Option<usize>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Answer test questions, score them, and write results and reports.
    Run {
        #[arg(long)]
        domain: String,
        #[arg(long)]
        questions: PathBuf,
        /// Fail (exit 1) when mean exact match, in percent, is below this.
        #[arg(long)]
        em_gate: Option<f64>,
        #[arg(long)]
        few_shot_floor: Option<usize>,
        #[arg(long)]
        timeout_secs: Option<u64>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Tally error categories over result files.
    Errors {
        #[arg(required = true)]
        results: Vec<PathBuf>,
        /// Write the failed rows here as JSONL for manual review.
        #[arg(long)]
        export: Option<PathBuf>,
    },
    /// Aggregate result files into report.md and report.csv.
    Report {
        /// Result files; defaults to every `*.results.jsonl` in the run directory.
        results: Vec<PathBuf>,
        /// Output directory; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Config {
    run_dir: Option<PathBuf>,
    corpus: Option<PathBuf>,
    jobs: Option<usize>,
    max_iters: Option<usize>,
    few_shot_floor: Option<usize>,
    timeout_secs: Option<u64>,
    em_gate: Option<f64>,
    #[serde(default)]
    profiles: BTreeMap<String, Profile>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct Profile {
    /// Model id sent to the endpoint; defaults to the profile name.
    model: Option<String>,
    base_url: Option<String>,
    api_key: Option<String>,
    request_timeout_secs: Option<u64>,
}

/// An error that maps to exit status 1 rather than 2.
#[derive(Debug)]
struct GateFailure(String);

impl std::fmt::Display for GateFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for GateFailure {}

fn load_config(path: Option<&Path>) -> anyhow::Result<Config> {
    let Some(path) = path else { return Ok(Config::default()) };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

/// Credentials come from `<PROFILE>_API_KEY` when set, then the config.
fn env_key(profile: &str, suffix: &str) -> Option<String> {
    std::env::var(format!("{}_{suffix}", profile.to_uppercase().replace(['-', '.', '/'], "_"))).ok()
}

struct Ctx {
    config: Config,
    run: RunDir,
    jobs: usize,
}

impl Ctx {
    fn corpus(&self, flag: Option<PathBuf>) -> anyhow::Result<PathBuf> {
        flag.or_else(|| self.config.corpus.clone()).context("no corpus directory; pass --corpus or set `corpus` in the config")
    }

    /// The model id written into requests and result rows.
    fn model_id(&self, args: &ModelArgs) -> anyhow::Result<String> {
        let name = args.model.clone().context("--model is required")?;
        Ok(self.config.profiles.get(&name).and_then(|p| p.model.clone()).unwrap_or(name))
    }

    fn client(&self, args: &ModelArgs, domain: &str) -> anyhow::Result<LlmClient> {
        if let Some(path) = &args.replay {
            if !path.exists() {
                bail!("replay file {} does not exist", path.display());
            }
            return Ok(LlmClient::replay(RecordStore::open(path)?));
        }
        let name = args.model.clone().context("--model is required")?;
        let transport: Arc<dyn Transport> = if name == PATTERN_MODEL {
            let (_, mapping, _) = pipeline::load_schema(&self.run, domain)?;
            Arc::new(PatternResponder::new(&default_patterns(), SchemaBindings::from_mapping(&mapping)))
        } else {
            let profile = self.config.profiles.get(&name).cloned().unwrap_or_default();
            let base_url = profile
                .base_url
                .or_else(|| env_key(&name, "BASE_URL"))
                .with_context(|| format!("no base_url for model {name:?}; set it in the config profile or the environment"))?;
            let key = env_key(&name, "API_KEY").or(profile.api_key);
            Arc::new(HttpTransport::new(&base_url, key, Duration::from_secs(profile.request_timeout_secs.unwrap_or(120))))
        };
        let store = match &args.record {
            Some(p) => RecordStore::open(p)?,
            None => RecordStore::in_memory(),
        };
        Ok(LlmClient::live(transport, store).with_concurrency(self.jobs))
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Command::Errors { results, export } = &cli.command {
        return errors(results, export.as_deref());
    }
    let config = load_config(cli.config.as_deref())?;
    let root = cli.run_dir.clone().or_else(|| config.run_dir.clone()).unwrap_or_else(|| PathBuf::from("run"));
    let jobs = cli
        .jobs
        .or(config.jobs)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
        .max(1);
    let ctx = Ctx { config, run: RunDir::create(&root)?, jobs };

    match cli.command {
        Command::Schema { domain, corpus, backend, model } => {
            let corpus = load_corpus(&ctx.corpus(corpus)?, &domain)?;
            let out = match backend {
                Backend::Fallback => pipeline::stage_schema(&ctx.run, &corpus, SchemaBackend::Fallback)?,
                Backend::Llm => {
                    if model.model.as_deref() == Some(PATTERN_MODEL) {
                        bail!("the pattern model only answers questions; it cannot design schemas");
                    }
                    let client = ctx.client(&model, &domain)?;
                    let id = match &model.model {
                        Some(_) => ctx.model_id(&model)?,
                        None if model.replay.is_some() => "replay".to_string(),
                        None => bail!("--model is required"),
                    };
                    pipeline::stage_schema(&ctx.run, &corpus, SchemaBackend::Llm { client: &client, model_id: &id })?
                }
            };
            ctx.run.write_manifest()?;
            println!("{domain}: {} tables", out.schema.tables.len());
            println!("{}", out.report.summary());
            if !out.report.passed {
                return Err(GateFailure(format!("{domain}: schema fails normal-form checks")).into());
            }
        }
        Command::Populate { domain, corpus, force } => {
            let corpus = load_corpus(&ctx.corpus(corpus)?, &domain)?;
            let out = pipeline::stage_populate(&ctx.run, &corpus, force)?;
            ctx.run.write_manifest()?;
            for r in &out.reports {
                println!(
                    "{}: {} rows; fields {} inserted, {} null, {} unmapped, {} failed",
                    r.entity, r.rows_inserted.values().sum::<usize>(), r.inserted, r.null_coerced, r.unmapped, r.failed
                );
            }
            for f in &out.failures {
                eprintln!("not loaded: {}: {}", f.file, f.error);
            }
            if !out.integrity.is_empty() {
                return Err(GateFailure(format!("{domain}: {} foreign-key edges have orphan rows", out.integrity.len())).into());
            }
        }
        Command::Goldloop { domain, questions, max_iters, patterns, few_shot_floor, model } => {
            let qs = load_questions(&questions)?;
            let client = ctx.client(&model, &domain)?;
            let id = ctx.model_id(&model).unwrap_or_else(|_| "replay".into());
            let patterns = patterns.as_deref().map(load_patterns).transpose()?;
            let opts = pipeline::GoldOptions {
                model_id: &id,
                max_iters: max_iters.or(ctx.config.max_iters).unwrap_or(DEFAULT_MAX_ITERS),
                jobs: ctx.jobs,
                timeout: Duration::from_secs(ctx.config.timeout_secs.unwrap_or(10)),
                patterns,
            };
            let out = pipeline::stage_goldloop(&ctx.run, &domain, &qs, &client, &opts)?;
            ctx.run.write_manifest()?;
            let floor = few_shot_floor.or(ctx.config.few_shot_floor).unwrap_or(DEFAULT_FEW_SHOT_FLOOR);
            println!("{domain}: {} of {} gold queries validated", out.validated(), out.examples.len());
            if out.validated() < floor {
                return Err(GateFailure(format!("{domain}: {} validated gold queries, {floor} needed", out.validated())).into());
            }
        }
        Command::Run { domain, questions, em_gate, few_shot_floor, timeout_secs, model } => {
            let qs = load_questions(&questions)?;
            let client = ctx.client(&model, &domain)?;
            let id = ctx.model_id(&model).unwrap_or_else(|_| "replay".into());
            let opts = pipeline::RunOptions {
                model_id: &id,
                jobs: ctx.jobs,
                timeout: Duration::from_secs(timeout_secs.or(ctx.config.timeout_secs).unwrap_or(10)),
                few_shot_floor: few_shot_floor.or(ctx.config.few_shot_floor).unwrap_or(DEFAULT_FEW_SHOT_FLOOR),
            };
            let out = pipeline::stage_run(&ctx.run, &domain, &qs, &client, &opts)?;
            ctx.run.write_manifest()?;
            let em = out.mean_em();
            println!("{domain}: {} questions, mean EM {em:.2}", out.lines.len());
            println!("results: {}", out.results_path.display());
            if let Some(gate) = em_gate.or(ctx.config.em_gate) {
                if em < gate {
                    return Err(GateFailure(format!("mean EM {em:.2} is below the gate {gate:.2}")).into());
                }
            }
        }
        Command::Errors { .. } => unreachable!("handled before the run directory is made"),
        Command::Report { results, out } => {
            let results = if results.is_empty() { pipeline::results_in(ctx.run.root())? } else { results };
            if results.is_empty() {
                bail!("no result files found in {}", ctx.run.root().display());
            }
            let out = out.unwrap_or_else(|| ctx.run.root().to_path_buf());
            let reports = pipeline::stage_report(&results, &out)?;
            if out == ctx.run.root() {
                ctx.run.write_manifest()?;
            }
            print!("{}", tempsql::evalharness::render_grid(&reports));
        }
    }
    Ok(())
}

fn errors(results: &[PathBuf], export: Option<&Path>) -> anyhow::Result<()> {
    let out = pipeline::stage_errors(results)?;
    print!("{}", render_error_table(&out.rows));
    if let Some(path) = export {
        let lines: String = out.failures.iter().map(|l| serde_json::to_string(l).expect("plain data serializes") + "\n").collect();
        std::fs::write(path, lines).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<GateFailure>() => {
            eprintln!("gate failed: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

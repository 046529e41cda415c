use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;
use tempsql::llmclient::RecordEntry;
use tempsql::schemagen::build_schema_prompt;
use tempsql::{CompletionRequest, RecordStore};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

fn questions(domain: &str, split: &str) -> String {
    fixtures().join(format!("questions/{domain}.{split}.jsonl")).display().to_string()
}

struct Work {
    dir: TempDir,
}

impl Work {
    fn new() -> Self {
        Self { dir: tempfile::tempdir().unwrap() }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_tempsql"))
            .current_dir(self.dir.path())
            .arg("--run-dir")
            .arg("run")
            .arg("--jobs")
            .arg("2")
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert_eq!(code(&out), 0, "{args:?}\nstdout: {}\nstderr: {}", stdout(&out), stderr(&out));
        stdout(&out)
    }

    fn prepare(&self, domain: &str) {
        let corpus = fixtures().join("corpus").display().to_string();
        self.ok(&["schema", "--domain", domain, "--corpus", &corpus]);
        self.ok(&["populate", "--domain", domain, "--corpus", &corpus]);
    }

    /// Live pattern-model gold loop and test run, both recorded.
    fn record(&self, domain: &str) {
        self.prepare(domain);
        self.ok(&["goldloop", "--domain", domain, "--questions", &questions(domain, "gold"), "--model", "pattern", "--record", "rec.jsonl"]);
        self.ok(&["run", "--domain", domain, "--questions", &questions(domain, "test"), "--model", "pattern", "--record", "rec.jsonl"]);
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn fallback_schema_is_written() {
    let w = Work::new();
    let corpus = fixtures().join("corpus").display().to_string();
    let out = w.ok(&["schema", "--domain", "countries", "--corpus", &corpus]);
    assert!(out.contains("passed"), "{out}");
    assert!(fs::read_to_string(w.path("run/countries.schema.sql")).unwrap().contains("CREATE TABLE"));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(w.path("run/manifest.json")).unwrap()).unwrap();
    assert!(manifest.get("countries.schema.sql").is_some());
}

#[test]
fn replayed_llm_schema_matches_the_reference() {
    let w = Work::new();
    let corpus = fixtures().join("corpus");
    let domain = tempsql::pipeline::load_corpus(&corpus, "countries").unwrap();
    let prompt = build_schema_prompt(&domain.timelines(), "countries").unwrap();
    let ddl = fs::read_to_string(fixtures().join("schemas/flash/countries.sql")).unwrap();
    let mut store = RecordStore::open(&w.path("schema.rec.jsonl")).unwrap();
    let request = CompletionRequest::new("schema-model", &prompt, "");
    store
        .insert(RecordEntry { hash: request.hash(), request, response: format!("```sql\n{ddl}```"), finish_reason: None })
        .unwrap();

    let corpus = corpus.display().to_string();
    let args = ["schema", "--domain", "countries", "--corpus", &corpus, "--backend", "llm", "--model", "schema-model", "--replay", "schema.rec.jsonl"];
    w.ok(&args);
    let got = tempsql::schema::parse_ddl(&fs::read_to_string(w.path("run/countries.schema.sql")).unwrap()).unwrap();
    assert!(got.equivalent(&tempsql::schema::parse_ddl(&ddl).unwrap()));
    let first = fs::read(w.path("run/countries.schema.sql")).unwrap();
    w.ok(&args);
    assert_eq!(first, fs::read(w.path("run/countries.schema.sql")).unwrap());
}

#[test]
fn unknown_domain_is_a_usage_error() {
    let w = Work::new();
    let corpus = fixtures().join("corpus").display().to_string();
    let out = w.run(&["schema", "--domain", "atlantis", "--corpus", &corpus]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("atlantis"), "{}", stderr(&out));
}

#[test]
fn populate_refuses_to_overwrite_without_force() {
    let w = Work::new();
    w.prepare("countries");
    let corpus = fixtures().join("corpus").display().to_string();
    let again = w.run(&["populate", "--domain", "countries", "--corpus", &corpus]);
    assert_eq!(code(&again), 2);
    assert!(stderr(&again).contains("already exists"));
    w.ok(&["populate", "--domain", "countries", "--corpus", &corpus, "--force"]);
}

#[test]
fn corrupt_timeline_is_listed_and_the_rest_load() {
    let w = Work::new();
    let src = fixtures().join("corpus/countries");
    let dst = w.path("corpus/countries");
    fs::create_dir_all(&dst).unwrap();
    for e in fs::read_dir(&src).unwrap() {
        let p = e.unwrap().path();
        fs::copy(&p, dst.join(p.file_name().unwrap())).unwrap();
    }
    fs::write(dst.join("broken.json"), "{\"title\": ").unwrap();

    let out = w.run(&["populate", "--domain", "countries", "--corpus", "corpus"]);
    assert_eq!(code(&out), 2, "schema missing, so populate cannot start");
    w.ok(&["schema", "--domain", "countries", "--corpus", "corpus"]);
    let out = w.run(&["populate", "--domain", "countries", "--corpus", "corpus"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stderr(&out).contains("broken.json"), "{}", stderr(&out));
    assert!(stdout(&out).contains("Arendia") && stdout(&out).contains("Borduria"), "{}", stdout(&out));
}

#[test]
fn goldloop_without_database_is_a_usage_error() {
    let w = Work::new();
    let corpus = fixtures().join("corpus").display().to_string();
    w.ok(&["schema", "--domain", "countries", "--corpus", &corpus]);
    let out = w.run(&["goldloop", "--domain", "countries", "--questions", &questions("countries", "gold"), "--model", "pattern"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn replayed_run_scores_full_marks_and_is_byte_identical() {
    let w = Work::new();
    w.record("countries");
    let gold = questions("countries", "gold");
    let test = questions("countries", "test");
    let snapshot = |w: &Work| -> Vec<(String, Vec<u8>)> {
        let mut files: Vec<_> = fs::read_dir(w.path("run"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.is_file() && !p.to_string_lossy().ends_with(".sqlite"))
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
            .collect();
        files.sort();
        files
    };

    let replay = |w: &Work| {
        w.ok(&["goldloop", "--domain", "countries", "--questions", &gold, "--model", "pattern", "--replay", "rec.jsonl"]);
        w.ok(&["run", "--domain", "countries", "--questions", &test, "--model", "pattern", "--replay", "rec.jsonl"])
    };
    let out = replay(&w);
    assert!(out.contains("mean EM 100.00"), "{out}");
    let first = snapshot(&w);
    replay(&w);
    assert_eq!(first, snapshot(&w));
}

#[test]
fn replay_miss_is_a_usage_error() {
    let w = Work::new();
    w.prepare("countries");
    w.ok(&["goldloop", "--domain", "countries", "--questions", &questions("countries", "gold"), "--model", "pattern", "--record", "rec.jsonl"]);
    fs::write(w.path("empty.jsonl"), "").unwrap();
    let out = w.run(&["run", "--domain", "countries", "--questions", &questions("countries", "test"), "--model", "pattern", "--replay", "empty.jsonl"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("no recorded response"), "{}", stderr(&out));
    let out = w.run(&["run", "--domain", "countries", "--questions", &questions("countries", "test"), "--model", "pattern", "--replay", "absent.jsonl"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn em_gate_failure_exits_one() {
    let w = Work::new();
    w.record("countries");
    let test = questions("countries", "test");
    let out = w.run(&["run", "--domain", "countries", "--questions", &test, "--model", "pattern", "--replay", "rec.jsonl", "--em-gate", "101"]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    w.ok(&["run", "--domain", "countries", "--questions", &test, "--model", "pattern", "--replay", "rec.jsonl", "--em-gate", "100"]);
}

#[test]
fn errors_over_all_correct_results_is_an_empty_table() {
    let w = Work::new();
    w.record("countries");
    let out = w.ok(&["errors", "run/countries.pattern.results.jsonl", "--export", "failed.jsonl"]);
    let body: Vec<&str> = out.lines().filter(|l| l.starts_with('|')).skip(2).collect();
    assert!(body.is_empty(), "{out}");
    assert_eq!(fs::read_to_string(w.path("failed.jsonl")).unwrap(), "");
}

#[test]
fn errors_rejects_malformed_results() {
    let w = Work::new();
    fs::write(w.path("bad.results.jsonl"), "{not json\n").unwrap();
    let out = w.run(&["errors", "bad.results.jsonl"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("line 1"), "{}", stderr(&out));
}

#[test]
fn report_lays_out_a_model_grid() {
    let w = Work::new();
    w.record("countries");
    let src = fs::read_to_string(w.path("run/countries.pattern.results.jsonl")).unwrap();
    fs::create_dir_all(w.path("grid")).unwrap();
    for (i, (schema_model, query_model)) in [("s1", "q1"), ("s1", "q2"), ("s2", "q1"), ("s2", "q2")].into_iter().enumerate() {
        let lines: Vec<String> = src
            .lines()
            .map(|l| {
                let mut v: Value = serde_json::from_str(l).unwrap();
                v["record"]["schema_model"] = schema_model.into();
                v["record"]["query_model"] = query_model.into();
                v.to_string()
            })
            .collect();
        fs::write(w.path(&format!("grid/{i}.results.jsonl")), lines.join("\n") + "\n").unwrap();
    }
    let files: Vec<String> = (0..4).map(|i| format!("grid/{i}.results.jsonl")).collect();
    let mut args = vec!["report", "--out", "grid"];
    args.extend(files.iter().map(String::as_str));
    let out = w.ok(&args);
    let header = out.lines().next().unwrap();
    assert!(header.contains("s1") && header.contains("s2"), "{out}");
    let rows: Vec<&str> = out.lines().filter(|l| l.starts_with("| q")).collect();
    assert_eq!(rows.len(), 2, "{out}");
    assert!(rows.iter().all(|r| r.matches("100.00 / 100.00").count() == 2), "{out}");
    assert!(w.path("grid/report.md").exists() && w.path("grid/report.csv").exists());
}

#[test]
fn config_file_supplies_defaults_and_rejects_unknown_keys() {
    let w = Work::new();
    let corpus = fixtures().join("corpus").display().to_string();
    fs::write(w.path("tempsql.toml"), format!("corpus = {corpus:?}\n")).unwrap();
    w.ok(&["--config", "tempsql.toml", "schema", "--domain", "cricket_team"]);
    fs::write(w.path("bad.toml"), "colour = 1\n").unwrap();
    let out = w.run(&["--config", "bad.toml", "schema", "--domain", "cricket_team"]);
    assert_eq!(code(&out), 2);
}

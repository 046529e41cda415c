//! Chat-completion boundary with record and replay.
//!
//! Every request is keyed by a SHA-256 hash of its canonical JSON form, which
//! covers the model id and all sampling parameters. In [`Mode::Live`] answers
//! come from a [`Transport`] and are appended to a [`RecordStore`]; in
//! [`Mode::Replay`] they come only from the store and the transport is never
//! touched.

use std::collections::{BTreeMap, VecDeque};
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_TOP_P: f64 = 0.9;
pub const DEFAULT_MAX_TOKENS: u32 = 2048;
pub const DEFAULT_CONCURRENCY: usize = 4;
pub const MAX_RETRIES: u32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("transport failed after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("no recorded response for request {hash} (prompt starts {prefix:?})")]
    ReplayMiss { hash: String, prefix: String },
    #[error("empty response without a finish reason")]
    EmptyResponse,
    #[error("live mode needs a transport")]
    NoTransport,
    #[error("record store {path}: {message}")]
    Store { path: PathBuf, message: String },
    #[error("configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub system_text: String,
    pub user_text: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub model_id: String,
}

impl CompletionRequest {
    /// Default sampling parameters; the domain prompt goes in the system slot.
    pub fn new(model_id: &str, system_text: &str, user_text: &str) -> Self {
        Self {
            system_text: system_text.to_string(),
            user_text: user_text.to_string(),
            temperature: DEFAULT_TEMPERATURE,
            top_p: DEFAULT_TOP_P,
            max_tokens: DEFAULT_MAX_TOKENS,
            model_id: model_id.to_string(),
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::InvalidRequest(format!("temperature {} outside [0, 2]", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(LlmError::InvalidRequest(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidRequest("max_tokens must be positive".into()));
        }
        if self.model_id.trim().is_empty() {
            return Err(LlmError::InvalidRequest("empty model id".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the request with keys in sorted order.
    pub fn hash(&self) -> String {
        let canonical: BTreeMap<&str, Value> = [
            ("max_tokens", json!(self.max_tokens)),
            ("model_id", json!(self.model_id)),
            ("system_text", json!(self.system_text)),
            ("temperature", json!(self.temperature)),
            ("top_p", json!(self.top_p)),
            ("user_text", json!(self.user_text)),
        ]
        .into_iter()
        .collect();
        let bytes = serde_json::to_vec(&canonical).expect("plain values serialize");
        hex::encode(Sha256::digest(bytes))
    }

    fn prefix(&self) -> String {
        let src = if self.user_text.is_empty() { &self.system_text } else { &self.user_text };
        src.chars().take(80).collect()
    }
}

impl Default for CompletionRequest {
    fn default() -> Self {
        Self::new("default", "", "")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionResult {
    pub text: String,
    pub model_id: String,
    pub latency: Duration,
    pub cached: bool,
    pub finish_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransportReply {
    pub text: String,
    pub finish_reason: Option<String>,
}

impl TransportReply {
    pub fn text(text: &str) -> Self {
        Self { text: text.to_string(), finish_reason: Some("stop".into()) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    /// Worth retrying: timeouts, 5xx.
    Transient(String),
    RateLimited,
    Auth(String),
    Fatal(String),
}

pub trait Transport: Send + Sync {
    fn send(&self, request: &CompletionRequest) -> Result<TransportReply, TransportError>;
}

/// OpenAI-compatible `POST {base_url}/chat/completions`.
pub struct HttpTransport {
    agent: ureq::Agent,
    base_url: String,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(base_url: &str, api_key: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder().http_status_as_error(false).timeout_global(Some(timeout)).build().into();
        Self { agent, base_url: base_url.trim_end_matches('/').to_string(), api_key }
    }

    /// Reads `<PROFILE>_BASE_URL` and `<PROFILE>_API_KEY`.
    pub fn from_env(profile: &str) -> Result<Self, LlmError> {
        let prefix = profile.to_uppercase().replace(['-', '.'], "_");
        let url = std::env::var(format!("{prefix}_BASE_URL"))
            .map_err(|_| LlmError::Config(format!("{prefix}_BASE_URL is not set")))?;
        let key = std::env::var(format!("{prefix}_API_KEY")).ok();
        Ok(Self::new(&url, key, Duration::from_secs(120)))
    }
}

impl Transport for HttpTransport {
    fn send(&self, r: &CompletionRequest) -> Result<TransportReply, TransportError> {
        let body = json!({
            "model": r.model_id,
            "messages": [
                {"role": "system", "content": r.system_text},
                {"role": "user", "content": r.user_text},
            ],
            "temperature": r.temperature,
            "top_p": r.top_p,
            "max_tokens": r.max_tokens,
        });
        let mut req = self.agent.post(&format!("{}/chat/completions", self.base_url));
        if let Some(k) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {k}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| TransportError::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| TransportError::Transient(e.to_string()))?;
        match status {
            200..=299 => {}
            401 | 403 => return Err(TransportError::Auth(format!("HTTP {status}"))),
            429 => return Err(TransportError::RateLimited),
            500..=599 => return Err(TransportError::Transient(format!("HTTP {status}"))),
            _ => return Err(TransportError::Fatal(format!("HTTP {status}: {}", text.chars().take(200).collect::<String>()))),
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| TransportError::Fatal(format!("bad JSON: {e}")))?;
        let choice = &v["choices"][0];
        Ok(TransportReply {
            text: choice["message"]["content"].as_str().unwrap_or_default().to_string(),
            finish_reason: choice["finish_reason"].as_str().map(str::to_string),
        })
    }
}

/// Serves queued replies in order and counts calls; for tests.
#[derive(Default)]
pub struct ScriptedTransport {
    replies: Mutex<VecDeque<Result<TransportReply, TransportError>>>,
    calls: AtomicUsize,
}

impl ScriptedTransport {
    pub fn new<I: IntoIterator<Item = Result<TransportReply, TransportError>>>(replies: I) -> Self {
        Self { replies: Mutex::new(replies.into_iter().collect()), calls: AtomicUsize::new(0) }
    }

    pub fn texts(texts: &[&str]) -> Self {
        Self::new(texts.iter().map(|t| Ok(TransportReply::text(t))))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Transport for ScriptedTransport {
    fn send(&self, _: &CompletionRequest) -> Result<TransportReply, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.replies.lock().unwrap().pop_front().unwrap_or_else(|| Err(TransportError::Fatal("script exhausted".into())))
    }
}

/// One line of the record file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub hash: String,
    pub request: CompletionRequest,
    pub response: String,
    #[serde(default)]
    pub finish_reason: Option<String>,
}

/// Hash-keyed responses, optionally backed by an append-only JSONL file.
/// The first entry for a hash wins.
#[derive(Debug, Default)]
pub struct RecordStore {
    path: Option<PathBuf>,
    entries: BTreeMap<String, RecordEntry>,
}

impl RecordStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads `path` if it exists; later appends go to the same file.
    pub fn open(path: &Path) -> Result<Self, LlmError> {
        let mut store = Self { path: Some(path.to_path_buf()), entries: BTreeMap::new() };
        if path.exists() {
            let text = std::fs::read_to_string(path).map_err(|e| store.err(e))?;
            for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let e: RecordEntry = serde_json::from_str(line)
                    .map_err(|e| LlmError::Store { path: path.to_path_buf(), message: format!("line {}: {e}", i + 1) })?;
                store.entries.entry(e.hash.clone()).or_insert(e);
            }
        }
        Ok(store)
    }

    fn err(&self, e: impl std::fmt::Display) -> LlmError {
        LlmError::Store { path: self.path.clone().unwrap_or_default(), message: e.to_string() }
    }

    pub fn get(&self, hash: &str) -> Option<&RecordEntry> {
        self.entries.get(hash)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &RecordEntry> {
        self.entries.values()
    }

    /// No-op when the hash is already present.
    pub fn insert(&mut self, entry: RecordEntry) -> Result<(), LlmError> {
        if self.entries.contains_key(&entry.hash) {
            return Ok(());
        }
        if let Some(path) = &self.path {
            let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| self.err(e))?;
            let line = serde_json::to_string(&entry).map_err(|e| self.err(e))?;
            writeln!(f, "{line}").map_err(|e| self.err(e))?;
        }
        self.entries.insert(entry.hash.clone(), entry);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Live,
    Replay,
}

struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Limiter {
    fn acquire(&self) -> LimiterGuard<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        LimiterGuard(self)
    }
}

struct LimiterGuard<'a>(&'a Limiter);

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

/// Shareable across threads.
pub struct LlmClient {
    mode: Mode,
    transport: Option<Arc<dyn Transport>>,
    store: Mutex<RecordStore>,
    limiter: Limiter,
    base_delay: Duration,
}

impl LlmClient {
    pub fn live(transport: Arc<dyn Transport>, store: RecordStore) -> Self {
        Self::build(Mode::Live, Some(transport), store)
    }

    pub fn replay(store: RecordStore) -> Self {
        Self::build(Mode::Replay, None, store)
    }

    fn build(mode: Mode, transport: Option<Arc<dyn Transport>>, store: RecordStore) -> Self {
        Self {
            mode,
            transport,
            store: Mutex::new(store),
            limiter: Limiter { free: Mutex::new(DEFAULT_CONCURRENCY), cv: Condvar::new() },
            base_delay: Duration::from_millis(500),
        }
    }

    /// Caps requests in flight at `n` (at least 1).
    pub fn with_concurrency(mut self, n: usize) -> Self {
        self.limiter = Limiter { free: Mutex::new(n.max(1)), cv: Condvar::new() };
        self
    }

    /// First retry waits `d`, doubling after each further failure.
    pub fn with_backoff(mut self, d: Duration) -> Self {
        self.base_delay = d;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn recorded(&self) -> usize {
        self.store.lock().unwrap().len()
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, LlmError> {
        request.validate()?;
        let started = Instant::now();
        let hash = request.hash();
        if let Some(e) = self.store.lock().unwrap().get(&hash) {
            return Ok(CompletionResult {
                text: e.response.clone(),
                model_id: request.model_id.clone(),
                latency: started.elapsed(),
                cached: true,
                finish_reason: e.finish_reason.clone(),
            });
        }
        let transport = match self.mode {
            Mode::Replay => return Err(LlmError::ReplayMiss { hash, prefix: request.prefix() }),
            Mode::Live => self.transport.as_ref().ok_or(LlmError::NoTransport)?,
        };
        let reply = {
            let _slot = self.limiter.acquire();
            self.send_with_retries(transport.as_ref(), request)?
        };
        if reply.text.is_empty() && reply.finish_reason.is_none() {
            return Err(LlmError::EmptyResponse);
        }
        self.store.lock().unwrap().insert(RecordEntry {
            hash,
            request: request.clone(),
            response: reply.text.clone(),
            finish_reason: reply.finish_reason.clone(),
        })?;
        Ok(CompletionResult {
            text: reply.text,
            model_id: request.model_id.clone(),
            latency: started.elapsed(),
            cached: false,
            finish_reason: reply.finish_reason,
        })
    }

    fn send_with_retries(&self, t: &dyn Transport, request: &CompletionRequest) -> Result<TransportReply, LlmError> {
        let mut delay = self.base_delay;
        let mut attempt = 0;
        loop {
            attempt += 1;
            let err = match t.send(request) {
                Ok(r) => return Ok(r),
                Err(TransportError::Auth(m)) => return Err(LlmError::Auth(m)),
                Err(TransportError::Fatal(m)) => return Err(LlmError::Transport { attempts: attempt, message: m }),
                Err(e) => e,
            };
            if attempt > MAX_RETRIES {
                return Err(match err {
                    TransportError::RateLimited => LlmError::RateLimited { attempts: attempt },
                    TransportError::Transient(m) => LlmError::Transport { attempts: attempt, message: m },
                    _ => unreachable!("non-retryable errors return above"),
                });
            }
            std::thread::sleep(delay);
            delay *= 2;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn live(t: Arc<ScriptedTransport>) -> LlmClient {
        LlmClient::live(t, RecordStore::in_memory()).with_backoff(Duration::ZERO)
    }

    #[test]
    fn defaults_are_the_fixed_sampling_configuration() {
        let r = CompletionRequest::default();
        assert_eq!((r.temperature, r.top_p, r.max_tokens), (0.1, 0.9, 2048));
        r.validate().unwrap();
    }

    #[test]
    fn validation_bounds() {
        let base = CompletionRequest::new("m", "s", "u");
        for bad in [
            CompletionRequest { temperature: 2.5, ..base.clone() },
            CompletionRequest { temperature: -0.1, ..base.clone() },
            CompletionRequest { top_p: 0.0, ..base.clone() },
            CompletionRequest { top_p: 1.1, ..base.clone() },
            CompletionRequest { max_tokens: 0, ..base.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(LlmError::InvalidRequest(_))), "{bad:?}");
        }
        CompletionRequest { temperature: 2.0, top_p: 1.0, ..base }.validate().unwrap();
    }

    #[test]
    fn hash_is_pinned_and_sensitive_to_every_field() {
        let r = CompletionRequest::new("m", "system", "user");
        // sha256 of {"max_tokens":2048,"model_id":"m","system_text":"system","temperature":0.1,"top_p":0.9,"user_text":"user"}
        assert_eq!(r.hash(), "40388cd7155d530a3ce3e5012a0540d33137d8d954a82696249830e92a3c5b17");
    }

    #[test]
    fn hash_changes_with_each_field() {
        let r = CompletionRequest::new("m", "system", "user");
        let variants = [
            CompletionRequest { model_id: "n".into(), ..r.clone() },
            CompletionRequest { system_text: "x".into(), ..r.clone() },
            CompletionRequest { user_text: "x".into(), ..r.clone() },
            CompletionRequest { temperature: 0.2, ..r.clone() },
            CompletionRequest { top_p: 0.8, ..r.clone() },
            CompletionRequest { max_tokens: 100, ..r.clone() },
        ];
        for v in variants {
            assert_ne!(v.hash(), r.hash());
        }
        assert_eq!(r.hash(), r.clone().hash());
    }

    #[test]
    fn second_identical_request_is_cached() {
        let t = Arc::new(ScriptedTransport::texts(&["SELECT 1"]));
        let c = live(t.clone());
        let r = CompletionRequest::new("m", "s", "u");
        let a = c.complete(&r).unwrap();
        let b = c.complete(&r).unwrap();
        assert_eq!((a.cached, b.cached), (false, true));
        assert_eq!(b.text, "SELECT 1");
        assert_eq!(t.calls(), 1);
    }

    #[test]
    fn transient_failures_are_retried_then_give_up() {
        let t = Arc::new(ScriptedTransport::new([
            Err(TransportError::Transient("503".into())),
            Err(TransportError::RateLimited),
            Ok(TransportReply::text("ok")),
        ]));
        assert_eq!(live(t.clone()).complete(&CompletionRequest::new("m", "s", "u")).unwrap().text, "ok");
        assert_eq!(t.calls(), 3);

        let t = Arc::new(ScriptedTransport::new((0..10).map(|_| Err(TransportError::RateLimited))));
        let e = live(t.clone()).complete(&CompletionRequest::new("m", "s", "u")).unwrap_err();
        assert!(matches!(e, LlmError::RateLimited { attempts: 4 }));
        assert_eq!(t.calls(), 1 + MAX_RETRIES as usize);

        let t = Arc::new(ScriptedTransport::new([Err(TransportError::Auth("401".into()))]));
        assert!(matches!(live(t.clone()).complete(&CompletionRequest::new("m", "s", "u")), Err(LlmError::Auth(_))));
        assert_eq!(t.calls(), 1);
    }

    #[test]
    fn empty_text_needs_a_finish_reason() {
        let t = Arc::new(ScriptedTransport::new([
            Ok(TransportReply { text: String::new(), finish_reason: None }),
            Ok(TransportReply { text: String::new(), finish_reason: Some("length".into()) }),
        ]));
        let c = live(t);
        assert!(matches!(c.complete(&CompletionRequest::new("m", "s", "a")), Err(LlmError::EmptyResponse)));
        assert_eq!(c.complete(&CompletionRequest::new("m", "s", "b")).unwrap().finish_reason.as_deref(), Some("length"));
    }

    #[test]
    fn record_then_replay_through_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rec.jsonl");
        let r = CompletionRequest::new("m", "schema prompt", "question?");
        let t = Arc::new(ScriptedTransport::texts(&["CREATE TABLE T (id INTEGER PRIMARY KEY);"]));
        LlmClient::live(t.clone(), RecordStore::open(&path).unwrap()).complete(&r).unwrap();
        // reopening sees the entry, so no second call and no second line
        let again = LlmClient::live(t.clone(), RecordStore::open(&path).unwrap());
        assert!(again.complete(&r).unwrap().cached);
        assert_eq!(t.calls(), 1);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
        let entry: RecordEntry = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(entry.hash, r.hash());

        let replay = LlmClient::replay(RecordStore::open(&path).unwrap());
        let got = replay.complete(&r).unwrap();
        assert!(got.cached);
        assert!(got.text.starts_with("CREATE TABLE"));
        match replay.complete(&CompletionRequest::new("m", "schema prompt", "other question")) {
            Err(LlmError::ReplayMiss { hash, prefix }) => {
                assert_eq!(hash.len(), 64);
                assert_eq!(prefix, "other question");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn replay_never_touches_a_transport() {
        let c = LlmClient::replay(RecordStore::in_memory());
        assert_eq!(c.mode(), Mode::Replay);
        assert!(matches!(c.complete(&CompletionRequest::new("m", "s", "u")), Err(LlmError::ReplayMiss { .. })));
    }

    #[test]
    fn concurrency_is_bounded() {
        struct Slow {
            now: AtomicUsize,
            peak: AtomicUsize,
        }
        impl Transport for Slow {
            fn send(&self, r: &CompletionRequest) -> Result<TransportReply, TransportError> {
                let n = self.now.fetch_add(1, Ordering::SeqCst) + 1;
                self.peak.fetch_max(n, Ordering::SeqCst);
                std::thread::sleep(Duration::from_millis(20));
                self.now.fetch_sub(1, Ordering::SeqCst);
                Ok(TransportReply::text(&r.user_text))
            }
        }
        let t = Arc::new(Slow { now: AtomicUsize::new(0), peak: AtomicUsize::new(0) });
        let c = Arc::new(LlmClient::live(t.clone(), RecordStore::in_memory()).with_concurrency(2));
        let handles: Vec<_> = (0..8)
            .map(|i| {
                let c = c.clone();
                std::thread::spawn(move || c.complete(&CompletionRequest::new("m", "s", &i.to_string())).unwrap())
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(t.peak.load(Ordering::SeqCst) <= 2);
        assert_eq!(c.recorded(), 8);
    }
}

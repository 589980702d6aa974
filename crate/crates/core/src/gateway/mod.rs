//! Uniform chat-completion access over an OpenAI-compatible endpoint or a
//! deterministic scripted backend.
//!
//! Every request carries a `stage` tag. Budgets (calls, tokens) are enforced
//! per [`Gateway`] instance, which the pipeline creates once per run.

mod http;
mod json;
mod script;
pub mod simulated;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use http::{HttpBackend, HttpBackendConfig, API_KEY_ENV, BASE_URL_ENV};
pub use json::{extract_json_payload, ParseFailure};
pub use script::{FallbackPolicy, MockBackend, ScriptBook, ScriptEntry, ScriptMatcher};
pub use simulated::SimulatedLlm;

/// Stage tags attached to every request.
pub mod stage {
    pub const ANNOTATE: &str = "annotate";
    pub const SYNTH_PLAN: &str = "synthesize_plan";
    pub const SYNTH_QUERY: &str = "synthesize_query";
    pub const DECOMPOSE: &str = "decompose";
    pub const ANNOTATE_SUBTASK: &str = "annotate_subtask";
    pub const SELECT_TOOL: &str = "select_tool";
    pub const GENERATE_PARAMS: &str = "generate_params";
    pub const PROCESS_RESPONSE: &str = "process_response";
    pub const REFINE_D1: &str = "refine_d1";
    pub const EXTRACT_RULES: &str = "extract_rules";
    pub const REFINE_D2: &str = "refine_d2";
    pub const REPAIR_SCHEMA: &str = "repair_schema";
    pub const GENERATE_DESCRIPTION: &str = "generate_description";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }
    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

/// Decoding parameters; defaults follow the inference setup used for the
/// description generators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub repetition_penalty: f64,
    pub max_tokens: u32,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 0.3,
            top_p: 0.9,
            repetition_penalty: 1.1,
            max_tokens: 2048,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub messages: Vec<ChatMessage>,
    #[serde(default)]
    pub sampling: SamplingParams,
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
}

impl ChatRequest {
    pub fn new(stage: &str, model_id: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        let mut tags = BTreeMap::new();
        tags.insert("stage".to_string(), stage.to_string());
        Self {
            model_id: model_id.into(),
            messages,
            sampling: SamplingParams::default(),
            tags,
        }
    }

    pub fn system_user(stage: &str, model_id: impl Into<String>, system: &str, user: String) -> Self {
        Self::new(stage, model_id, vec![ChatMessage::system(system), ChatMessage::user(user)])
    }

    pub fn stage(&self) -> &str {
        self.tags.get("stage").map(String::as_str).unwrap_or("")
    }

    pub fn with_tag(mut self, key: &str, value: &str) -> Self {
        self.tags.insert(key.to_string(), value.to_string());
        self
    }

    pub fn last_content(&self) -> &str {
        self.messages.last().map(|m| m.content.as_str()).unwrap_or("")
    }

    fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("messages must not be empty".into()));
        }
        if self.messages.iter().skip(1).any(|m| m.role == Role::System) {
            return Err(GatewayError::InvalidRequest("system message must come first".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Usage {
    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Usage,
    pub latency_ms: u64,
    pub backend: BackendKind,
}

/// Failure reported by a backend for a single attempt.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("transient transport failure: {0}")]
    Transient(String),
    #[error("client error {status}: {body}")]
    Client { status: u16, body: String },
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("no script entry matched stage `{stage}`")]
    NoScriptMatch { stage: String },
}

pub trait ChatBackend: Send + Sync {
    fn kind(&self) -> BackendKind;
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("transport failed after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("client error {status}: {body}")]
    Client { status: u16, body: String },
    #[error("budget exceeded: {0}")]
    BudgetExceeded(String),
    #[error("no script entry matched stage `{stage}`")]
    NoScriptMatch { stage: String },
    #[error(transparent)]
    Parse(#[from] ParseFailure),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub model_id: String,
    /// Maximum number of completed backend calls for this run.
    pub max_calls: Option<u64>,
    /// Maximum total tokens (prompt + completion) for this run.
    pub max_tokens: Option<u64>,
    /// Retries after the first attempt for transient failures.
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub max_in_flight: usize,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            model_id: "mock".into(),
            max_calls: None,
            max_tokens: None,
            max_retries: 3,
            backoff_base_ms: 200,
            max_in_flight: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StageStats {
    pub calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub failures: u64,
}

struct InFlight {
    limit: usize,
    current: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.current.lock().expect("in-flight lock");
        while *n >= self.limit {
            n = self.cv.wait(n).expect("in-flight lock");
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.current.lock().expect("in-flight lock");
        *n -= 1;
        self.0.cv.notify_one();
    }
}

pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    config: GatewayConfig,
    calls: AtomicU64,
    tokens: AtomicU64,
    in_flight: InFlight,
    stats: Mutex<BTreeMap<String, StageStats>>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>, config: GatewayConfig) -> Self {
        let limit = config.max_in_flight.max(1);
        Self {
            backend,
            config,
            calls: AtomicU64::new(0),
            tokens: AtomicU64::new(0),
            in_flight: InFlight {
                limit,
                current: Mutex::new(0),
                cv: Condvar::new(),
            },
            stats: Mutex::new(BTreeMap::new()),
        }
    }

    /// Gateway over a script book with default configuration.
    pub fn mock(book: ScriptBook) -> Self {
        Self::new(Arc::new(MockBackend::new(book)), GatewayConfig::default())
    }

    /// Gateway whose only behavior is the deterministic simulated model.
    pub fn simulated() -> Self {
        Self::mock(ScriptBook::simulated())
    }

    pub fn model_id(&self) -> &str {
        &self.config.model_id
    }

    pub fn backend_kind(&self) -> BackendKind {
        self.backend.kind()
    }

    pub fn calls_used(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn tokens_used(&self) -> u64 {
        self.tokens.load(Ordering::SeqCst)
    }

    pub fn stage_stats(&self) -> BTreeMap<String, StageStats> {
        self.stats.lock().expect("stats lock").clone()
    }

    /// Builds a request for this gateway's model.
    pub fn request(&self, stage: &str, system: &str, user: String) -> ChatRequest {
        ChatRequest::system_user(stage, self.config.model_id.clone(), system, user)
    }

    fn reserve_call(&self) -> Result<(), GatewayError> {
        if let Some(max) = self.config.max_tokens {
            if self.tokens.load(Ordering::SeqCst) >= max {
                return Err(GatewayError::BudgetExceeded(format!("token budget of {max} exhausted")));
            }
        }
        let prev = self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(max) = self.config.max_calls {
            if prev >= max {
                self.calls.fetch_sub(1, Ordering::SeqCst);
                return Err(GatewayError::BudgetExceeded(format!("call budget of {max} exhausted")));
            }
        }
        Ok(())
    }

    fn record(&self, stage: &str, usage: Option<Usage>) {
        let mut stats = self.stats.lock().expect("stats lock");
        let s = stats.entry(stage.to_string()).or_default();
        match usage {
            Some(u) => {
                s.calls += 1;
                s.prompt_tokens += u.prompt_tokens;
                s.completion_tokens += u.completion_tokens;
            }
            None => s.failures += 1,
        }
    }

    /// Sends one request, retrying transient failures with exponential backoff.
    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        self.reserve_call()?;
        let _permit = self.in_flight.acquire();
        let stage = request.stage().to_string();
        let mut attempt = 0u32;
        loop {
            let started = Instant::now();
            match self.backend.send(request) {
                Ok(mut resp) => {
                    if resp.backend == BackendKind::Http {
                        resp.latency_ms = started.elapsed().as_millis() as u64;
                    }
                    self.tokens.fetch_add(resp.usage.total(), Ordering::SeqCst);
                    self.record(&stage, Some(resp.usage));
                    return Ok(resp);
                }
                Err(BackendError::Transient(msg)) if attempt < self.config.max_retries => {
                    log::warn!("stage {stage}: transient failure (attempt {}): {msg}", attempt + 1);
                    let delay = self.config.backoff_base_ms.saturating_mul(1 << attempt.min(16));
                    std::thread::sleep(Duration::from_millis(delay));
                    attempt += 1;
                }
                Err(e) => {
                    self.record(&stage, None);
                    return Err(match e {
                        BackendError::Transient(message) => GatewayError::Transport {
                            attempts: attempt + 1,
                            message,
                        },
                        BackendError::Client { status, body } => GatewayError::Client { status, body },
                        BackendError::Auth(m) => GatewayError::Auth(m),
                        BackendError::NoScriptMatch { stage } => GatewayError::NoScriptMatch { stage },
                    });
                }
            }
        }
    }

    /// Completes and parses a JSON payload. A malformed reply is re-asked once
    /// with an explicit JSON-only reminder before failing.
    pub fn complete_json(&self, request: &ChatRequest) -> Result<Value, GatewayError> {
        let first = self.complete(request)?;
        match extract_json_payload(&first.text) {
            Ok(v) => Ok(v),
            Err(_) => {
                let mut retry = request.clone();
                retry.messages.push(ChatMessage::assistant(first.text));
                retry.messages.push(ChatMessage::user(crate::prompts::JSON_REMINDER));
                retry.tags.insert("retry".into(), "json".into());
                let second = self.complete(&retry)?;
                Ok(extract_json_payload(&second.text)?)
            }
        }
    }
}

/// Whitespace token count used for mock usage accounting.
pub(crate) fn rough_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicU32;

    struct Flaky {
        fail_first: u32,
        seen: AtomicU32,
        error: BackendError,
    }

    impl ChatBackend for Flaky {
        fn kind(&self) -> BackendKind {
            BackendKind::Mock
        }
        fn send(&self, _r: &ChatRequest) -> Result<ChatResponse, BackendError> {
            let n = self.seen.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_first {
                return Err(self.error.clone());
            }
            Ok(ChatResponse {
                text: "{\"ok\": true}".into(),
                usage: Usage { prompt_tokens: 3, completion_tokens: 2 },
                latency_ms: 0,
                backend: BackendKind::Mock,
            })
        }
    }

    fn gw(fail_first: u32, error: BackendError, config: GatewayConfig) -> (Gateway, Arc<Flaky>) {
        let b = Arc::new(Flaky { fail_first, seen: AtomicU32::new(0), error });
        (Gateway::new(b.clone(), config), b)
    }

    fn fast() -> GatewayConfig {
        GatewayConfig { backoff_base_ms: 1, ..GatewayConfig::default() }
    }

    fn req() -> ChatRequest {
        ChatRequest::system_user("select_tool", "m", "sys", "hi".into())
    }

    #[test]
    fn default_sampling() {
        let s = SamplingParams::default();
        assert_eq!((s.temperature, s.top_p, s.repetition_penalty), (0.3, 0.9, 1.1));
    }

    #[test]
    fn transient_failures_are_retried() {
        let (g, b) = gw(2, BackendError::Transient("reset".into()), fast());
        assert!(g.complete(&req()).is_ok());
        assert_eq!(b.seen.load(Ordering::SeqCst), 3);
        assert_eq!(g.tokens_used(), 5);
    }

    #[test]
    fn retries_are_bounded() {
        let (g, b) = gw(100, BackendError::Transient("down".into()), fast());
        let err = g.complete(&req()).unwrap_err();
        assert_eq!(err, GatewayError::Transport { attempts: 4, message: "down".into() });
        assert_eq!(b.seen.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (g, b) = gw(1, BackendError::Client { status: 400, body: "bad".into() }, fast());
        assert!(matches!(g.complete(&req()), Err(GatewayError::Client { status: 400, .. })));
        assert_eq!(b.seen.load(Ordering::SeqCst), 1);
        let (g, _) = gw(1, BackendError::Auth("nope".into()), fast());
        assert!(matches!(g.complete(&req()), Err(GatewayError::Auth(_))));
    }

    #[test]
    fn call_budget_enforced() {
        let (g, _) = gw(0, BackendError::Transient(String::new()), GatewayConfig { max_calls: Some(2), ..fast() });
        assert!(g.complete(&req()).is_ok());
        assert!(g.complete(&req()).is_ok());
        assert!(matches!(g.complete(&req()), Err(GatewayError::BudgetExceeded(_))));
        assert_eq!(g.calls_used(), 2);
    }

    #[test]
    fn token_budget_enforced() {
        let (g, _) = gw(0, BackendError::Transient(String::new()), GatewayConfig { max_tokens: Some(5), ..fast() });
        assert!(g.complete(&req()).is_ok());
        assert!(matches!(g.complete(&req()), Err(GatewayError::BudgetExceeded(_))));
    }

    #[test]
    fn request_validation() {
        let (g, _) = gw(0, BackendError::Transient(String::new()), fast());
        let mut r = req();
        r.messages.clear();
        assert!(matches!(g.complete(&r), Err(GatewayError::InvalidRequest(_))));
        let mut r = req();
        r.messages.push(ChatMessage::system("late"));
        assert!(matches!(g.complete(&r), Err(GatewayError::InvalidRequest(_))));
    }

    #[test]
    fn json_reask_once() {
        let book = ScriptBook::from_entries(vec![
            ScriptEntry::new(ScriptMatcher::stage("refine_d1").containing("Output ONLY valid JSON (no markdown"), "{\"description\": \"fixed\"}"),
            ScriptEntry::new(ScriptMatcher::stage("refine_d1"), "not json at all"),
        ]);
        let g = Gateway::mock(book);
        let r = ChatRequest::system_user("refine_d1", "m", "s", "rewrite".into());
        let v = g.complete_json(&r).unwrap();
        assert_eq!(v["description"], "fixed");
        assert_eq!(g.calls_used(), 2);

        let always_bad = Gateway::mock(ScriptBook::from_entries(vec![ScriptEntry::new(
            ScriptMatcher::stage("refine_d1"),
            "still not json",
        )]));
        assert!(matches!(always_bad.complete_json(&r), Err(GatewayError::Parse(_))));
        assert_eq!(always_bad.calls_used(), 2);
    }

    #[test]
    fn concurrent_accounting_is_exact() {
        let (g, _) = gw(0, BackendError::Transient(String::new()), GatewayConfig { max_in_flight: 2, ..fast() });
        let g = Arc::new(g);
        std::thread::scope(|s| {
            for _ in 0..8 {
                let g = g.clone();
                s.spawn(move || {
                    for _ in 0..25 {
                        g.complete(&req()).unwrap();
                    }
                });
            }
        });
        assert_eq!(g.calls_used(), 200);
        assert_eq!(g.tokens_used(), 1000);
        assert_eq!(g.stage_stats()["select_tool"].calls, 200);
    }
}

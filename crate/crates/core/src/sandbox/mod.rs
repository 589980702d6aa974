//! Simulated tool environment `o_t = F_env(a_t, p_t)`.
//!
//! Every registered tool has a hidden [`ToolBehavior`] (true required set,
//! true types, error mode, response template). Declared schemas live in a
//! separate [`ToolCollection`] and may disagree with the behavior.

mod cache;
mod corrupt;
mod server;
mod universe;

use std::collections::BTreeMap;
use std::net::Ipv4Addr;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::types::{JsonObject, ParamType, ResponseStatus, ToolCollection, ToolRef, ToolResponse};

pub use cache::{CacheKey, CacheRecord, CallCache};
pub use corrupt::{
    corrupt_declared_schema, flipped, CorruptionDiff, CorruptionEntry, CorruptionError, CorruptionSpec, SchemaEdit,
};
pub use server::{router, HttpEnvironment, SandboxServer};
pub use universe::{build_synthetic_universe, plural, DependencyEdge, Universe, UniverseConfig};

/// Upper bound on serialized response bodies.
pub const MAX_BODY_BYTES: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMode {
    #[default]
    None,
    #[serde(rename = "always_401")]
    Always401,
    #[serde(rename = "always_404")]
    Always404,
    #[serde(rename = "always_500")]
    Always500,
    /// Every `n`-th call (per tool) fails with a server error.
    FlakyWithPeriod(u64),
}

impl ErrorMode {
    pub fn is_broken(self) -> bool {
        matches!(self, ErrorMode::Always401 | ErrorMode::Always404 | ErrorMode::Always500)
    }
}

/// Value-format checks applied after the type check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamFormat {
    Ipv4,
    IsoDate,
    Uppercase,
}

impl ParamFormat {
    pub fn accepts(self, v: &Value) -> bool {
        let Some(s) = v.as_str() else { return false };
        match self {
            ParamFormat::Ipv4 => s.parse::<Ipv4Addr>().is_ok(),
            ParamFormat::IsoDate => {
                let b = s.as_bytes();
                b.len() == 10
                    && b[4] == b'-'
                    && b[7] == b'-'
                    && b.iter().enumerate().all(|(i, c)| i == 4 || i == 7 || c.is_ascii_digit())
            }
            ParamFormat::Uppercase => !s.is_empty() && s.chars().all(|c| !c.is_lowercase()),
        }
    }

    pub fn noun(self) -> &'static str {
        match self {
            ParamFormat::Ipv4 => "IPv4 address",
            ParamFormat::IsoDate => "date in YYYY-MM-DD format",
            ParamFormat::Uppercase => "uppercase string",
        }
    }
}

/// Deterministic pseudo-data generator for successful responses.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResponseTemplate {
    /// When set, items are wrapped in a list under this key.
    #[serde(default)]
    pub list_key: Option<String>,
    #[serde(default = "one")]
    pub list_len: usize,
    #[serde(default)]
    pub id_fields: Vec<String>,
    #[serde(default)]
    pub text_fields: Vec<String>,
    #[serde(default)]
    pub number_fields: Vec<String>,
    /// Copy (truncated) arguments into the top-level body.
    #[serde(default)]
    pub echo_args: bool,
}

fn one() -> usize {
    1
}

impl ResponseTemplate {
    pub fn render(&self, tool: &ToolRef, args: &JsonObject, seed: u64) -> Value {
        let canonical = canonical_json(&Value::Object(args.clone()));
        let digest = Sha256::digest(format!("{tool}|{canonical}|{seed}").as_bytes());
        let mut rng = ChaCha8Rng::from_seed(digest.into());
        let mut body = JsonObject::new();
        if self.echo_args {
            for (k, v) in sorted(args) {
                let v = match v {
                    Value::String(s) if s.len() > 64 => json!(s.chars().take(64).collect::<String>()),
                    other => other.clone(),
                };
                body.insert(k.clone(), v);
            }
        }
        let item = |rng: &mut ChaCha8Rng| {
            let mut o = JsonObject::new();
            for f in &self.id_fields {
                o.insert(f.clone(), json!(rng.gen_range(100..10_000u32)));
            }
            for f in &self.text_fields {
                o.insert(f.clone(), json!(format!("{f}-{:06x}", rng.gen::<u32>() & 0xff_ffff)));
            }
            for f in &self.number_fields {
                o.insert(f.clone(), json!(f64::from(rng.gen_range(0..50u32)) / 10.0));
            }
            o
        };
        match &self.list_key {
            Some(key) => {
                let mut items: Vec<Value> = (0..self.list_len.max(1)).map(|_| Value::Object(item(&mut rng))).collect();
                loop {
                    let mut b = body.clone();
                    b.insert("count".into(), json!(items.len()));
                    b.insert(key.clone(), Value::Array(items.clone()));
                    let v = Value::Object(b);
                    if items.len() <= 1 || v.to_string().len() <= MAX_BODY_BYTES {
                        return v;
                    }
                    items.pop();
                }
            }
            None => {
                for (k, v) in item(&mut rng) {
                    body.insert(k, v);
                }
                if body.is_empty() {
                    body.insert("status".into(), json!("done"));
                }
                Value::Object(body)
            }
        }
    }
}

/// Hidden ground truth for one tool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolBehavior {
    pub tool: ToolRef,
    pub true_required: Vec<String>,
    pub true_types: BTreeMap<String, ParamType>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub formats: BTreeMap<String, ParamFormat>,
    #[serde(default)]
    pub response_template: ResponseTemplate,
    #[serde(default)]
    pub error_mode: ErrorMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u64>,
}

impl ToolBehavior {
    pub fn is_consistent(&self) -> bool {
        self.true_required.iter().all(|r| self.true_types.contains_key(r))
            && self.formats.keys().all(|k| self.true_types.contains_key(k))
    }

    /// Validation in fixed precedence: missing, unexpected, then type/format.
    /// Error modes are handled by the caller.
    pub fn validate(&self, args: &JsonObject) -> Result<(), ToolResponse> {
        for r in &self.true_required {
            if args.get(r).is_none_or(Value::is_null) {
                return Err(ToolResponse::error(
                    ResponseStatus::MissingRequiredParam(r.clone()),
                    format!("Error: Missing required parameter '{r}'"),
                ));
            }
        }
        for (k, _) in sorted(args) {
            if !self.true_types.contains_key(k) {
                return Err(ToolResponse::error(
                    ResponseStatus::UnexpectedParam(k.clone()),
                    format!("Error: Unexpected parameter '{k}'"),
                ));
            }
        }
        for (k, v) in sorted(args) {
            if v.is_null() {
                continue;
            }
            let ty = self.true_types[k];
            if !ty.matches(v) {
                return Err(type_error(k, ty.noun()));
            }
            if let Some(f) = self.formats.get(k) {
                if !f.accepts(v) {
                    return Err(type_error(k, f.noun()));
                }
            }
        }
        Ok(())
    }
}

fn type_error(name: &str, expected: &str) -> ToolResponse {
    ToolResponse::error(
        ResponseStatus::TypeError(name.to_string()),
        format!("Error: Type error for parameter '{name}': expected {expected}"),
    )
}

fn sorted(args: &JsonObject) -> Vec<(&String, &Value)> {
    let mut v: Vec<_> = args.iter().collect();
    v.sort_by(|a, b| a.0.cmp(b.0));
    v
}

/// Sorted-key JSON without insignificant whitespace.
pub fn canonical_json(v: &Value) -> String {
    fn canon(v: &Value) -> Value {
        match v {
            Value::Object(m) => {
                let mut keys: Vec<_> = m.keys().collect();
                keys.sort();
                let mut out = JsonObject::new();
                for k in keys {
                    out.insert(k.clone(), canon(&m[k]));
                }
                Value::Object(out)
            }
            Value::Array(a) => Value::Array(a.iter().map(canon).collect()),
            other => other.clone(),
        }
    }
    canon(v).to_string()
}

#[derive(Debug, Error, PartialEq)]
pub enum SandboxError {
    #[error("unknown tool {0}")]
    UnknownTool(ToolRef),
    #[error("inconsistent behavior for {0}: required parameters must have a type")]
    InconsistentBehavior(ToolRef),
    #[error("cache file {path}: {message}")]
    CacheIo { path: String, message: String },
    #[error("transport: {0}")]
    Transport(String),
}

/// Anything that can execute a tool call.
pub trait ToolEnvironment: Send + Sync {
    fn invoke(&self, tool: &ToolRef, args: &JsonObject, seed: u64) -> Result<ToolResponse, SandboxError>;
}

pub struct Sandbox {
    behaviors: BTreeMap<ToolRef, ToolBehavior>,
    counters: BTreeMap<ToolRef, AtomicU64>,
    declared: RwLock<ToolCollection>,
    cache: CallCache,
}

impl Sandbox {
    pub fn new(declared: ToolCollection, behaviors: Vec<ToolBehavior>) -> Result<Self, SandboxError> {
        let mut map = BTreeMap::new();
        let mut counters = BTreeMap::new();
        for b in behaviors {
            if !b.is_consistent() {
                return Err(SandboxError::InconsistentBehavior(b.tool));
            }
            counters.insert(b.tool.clone(), AtomicU64::new(0));
            map.insert(b.tool.clone(), b);
        }
        Ok(Self {
            behaviors: map,
            counters,
            declared: RwLock::new(declared),
            cache: CallCache::in_memory(),
        })
    }

    /// Attaches an append-only cache file, loading any entries already in it.
    pub fn with_cache_file(mut self, path: &Path) -> Result<Self, SandboxError> {
        self.cache = CallCache::open(path)?;
        Ok(self)
    }

    pub fn behavior(&self, tool: &ToolRef) -> Option<&ToolBehavior> {
        self.behaviors.get(tool)
    }

    pub fn behaviors(&self) -> impl Iterator<Item = &ToolBehavior> {
        self.behaviors.values()
    }

    pub fn cache(&self) -> &CallCache {
        &self.cache
    }

    pub fn declared(&self) -> ToolCollection {
        self.declared.read().expect("declared lock").clone()
    }

    pub fn set_declared(&self, collection: ToolCollection) {
        *self.declared.write().expect("declared lock") = collection;
    }

    /// Declared schemas of one provider, as served over HTTP.
    pub fn provider_schema(&self, provider_id: &str) -> Option<Value> {
        let declared = self.declared.read().expect("declared lock");
        let tools = declared.provider_tools(provider_id);
        if tools.is_empty() {
            return None;
        }
        Some(crate::prompts::provider_schema_json(provider_id, &tools))
    }

    fn execute(&self, b: &ToolBehavior, args: &JsonObject, seed: u64) -> ToolResponse {
        let fixed = match b.error_mode {
            ErrorMode::Always401 => Some((ResponseStatus::Unauthorized, "Error: 401 Unauthorized")),
            ErrorMode::Always404 => Some((ResponseStatus::NotFound, "Error: 404 Not Found")),
            ErrorMode::Always500 => Some((ResponseStatus::ServerError, "Error: 500 Internal Server Error")),
            _ => None,
        };
        if let Some((status, msg)) = fixed {
            return ToolResponse::error(status, msg);
        }
        if let Err(e) = b.validate(args) {
            return e;
        }
        if let Some(ms) = b.latency_ms {
            std::thread::sleep(std::time::Duration::from_millis(ms));
        }
        ToolResponse::ok(b.response_template.render(&b.tool, args, seed))
    }
}

impl ToolEnvironment for Sandbox {
    fn invoke(&self, tool: &ToolRef, args: &JsonObject, seed: u64) -> Result<ToolResponse, SandboxError> {
        let b = self
            .behaviors
            .get(tool)
            .ok_or_else(|| SandboxError::UnknownTool(tool.clone()))?;
        if let ErrorMode::FlakyWithPeriod(p) = b.error_mode {
            let n = self.counters[tool].fetch_add(1, Ordering::SeqCst) + 1;
            if p > 0 && n.is_multiple_of(p) {
                return Ok(ToolResponse::error(
                    ResponseStatus::ServerError,
                    "Error: 500 Internal Server Error",
                ));
            }
        }
        let key = CacheKey::new(tool, args, seed);
        if let Some(mut hit) = self.cache.get(&key) {
            hit.from_cache = true;
            return Ok(hit);
        }
        let resp = self.execute(b, args, seed);
        self.cache.put(key, &resp)?;
        Ok(resp)
    }
}

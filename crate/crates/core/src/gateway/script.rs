use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{rough_tokens, BackendError, BackendKind, ChatBackend, ChatRequest, ChatResponse, Role, SimulatedLlm, Usage};

/// Conditions that must all hold for an entry to fire.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptMatcher {
    /// Request `stage` tag.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    /// Substring of the last message.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    /// Hex SHA-256 of the whole conversation, see [`conversation_hash`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_hash: Option<String>,
    /// Number of assistant turns already present in the request.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turn: Option<usize>,
}

impl ScriptMatcher {
    pub fn stage(stage: &str) -> Self {
        Self {
            stage: Some(stage.to_string()),
            ..Self::default()
        }
    }

    pub fn containing(mut self, needle: &str) -> Self {
        self.contains = Some(needle.to_string());
        self
    }

    pub fn at_turn(mut self, turn: usize) -> Self {
        self.turn = Some(turn);
        self
    }

    pub fn with_hash(mut self, hash: &str) -> Self {
        self.content_hash = Some(hash.to_string());
        self
    }

    pub fn fires(&self, req: &ChatRequest) -> bool {
        if let Some(s) = &self.stage {
            if req.stage() != s {
                return false;
            }
        }
        if let Some(c) = &self.contains {
            if !req.last_content().contains(c.as_str()) {
                return false;
            }
        }
        if let Some(t) = self.turn {
            let turns = req.messages.iter().filter(|m| m.role == Role::Assistant).count();
            if turns != t {
                return false;
            }
        }
        if let Some(h) = &self.content_hash {
            if !conversation_hash(req).eq_ignore_ascii_case(h) {
                return false;
            }
        }
        true
    }
}

/// SHA-256 over `role:content\n` for every message.
pub fn conversation_hash(req: &ChatRequest) -> String {
    let mut h = Sha256::new();
    for m in &req.messages {
        let role = match m.role {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        };
        h.update(role.as_bytes());
        h.update(b":");
        h.update(m.content.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(flatten)]
    pub matcher: ScriptMatcher,
    pub response: String,
}

impl ScriptEntry {
    pub fn new(matcher: ScriptMatcher, response: impl Into<String>) -> Self {
        Self {
            matcher,
            response: response.into(),
        }
    }
}

/// What answers a request when no entry fires and there is no default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FallbackPolicy {
    Simulated,
}

/// Ordered response script; the first entry whose matcher fires wins.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptBook {
    pub entries: Vec<ScriptEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<FallbackPolicy>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum BookFile {
    List(Vec<ScriptEntry>),
    Book(ScriptBook),
}

impl ScriptBook {
    pub fn from_entries(entries: Vec<ScriptEntry>) -> Self {
        Self {
            entries,
            ..Self::default()
        }
    }

    /// Book with no entries that defers everything to the simulated model.
    pub fn simulated() -> Self {
        Self {
            fallback: Some(FallbackPolicy::Simulated),
            ..Self::default()
        }
    }

    /// Accepts either a bare JSON list of entries or a full book object.
    pub fn from_json_str(s: &str) -> Result<Self, serde_json::Error> {
        Ok(match serde_json::from_str::<BookFile>(s)? {
            BookFile::List(entries) => Self::from_entries(entries),
            BookFile::Book(b) => b,
        })
    }

    pub fn lookup(&self, req: &ChatRequest) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| e.matcher.fires(req))
            .map(|e| e.response.as_str())
            .or(self.default_response.as_deref())
    }
}

pub struct MockBackend {
    book: ScriptBook,
    simulated: SimulatedLlm,
}

impl MockBackend {
    pub fn new(book: ScriptBook) -> Self {
        Self {
            book,
            simulated: SimulatedLlm::new(),
        }
    }
}

impl ChatBackend for MockBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Mock
    }

    fn send(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let text = match self.book.lookup(req) {
            Some(t) => t.to_string(),
            None => match self.book.fallback {
                Some(FallbackPolicy::Simulated) => self.simulated.respond(req),
                None => {
                    return Err(BackendError::NoScriptMatch {
                        stage: req.stage().to_string(),
                    })
                }
            },
        };
        let prompt_tokens = req.messages.iter().map(|m| rough_tokens(&m.content)).sum();
        Ok(ChatResponse {
            usage: Usage {
                prompt_tokens,
                completion_tokens: rough_tokens(&text),
            },
            text,
            latency_ms: 0,
            backend: BackendKind::Mock,
        })
    }
}

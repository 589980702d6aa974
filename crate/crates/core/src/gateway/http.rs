use std::time::Duration;

use serde_json::{json, Value};

use super::{BackendError, BackendKind, ChatBackend, ChatRequest, ChatResponse, Role, Usage};

pub const API_KEY_ENV: &str = "MODEL_API_KEY";
pub const BASE_URL_ENV: &str = "MODEL_BASE_URL";

#[derive(Debug, Clone)]
pub struct HttpBackendConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl HttpBackendConfig {
    /// Base URL from the argument or `MODEL_BASE_URL`; key from `MODEL_API_KEY`.
    pub fn from_env(base_url: Option<&str>) -> Option<Self> {
        let base_url = base_url
            .map(str::to_string)
            .or_else(|| std::env::var(BASE_URL_ENV).ok())?;
        Some(Self {
            base_url,
            api_key: std::env::var(API_KEY_ENV).ok(),
            timeout: Duration::from_secs(120),
        })
    }
}

/// OpenAI-compatible `POST /v1/chat/completions` client.
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        Ok(Self {
            client,
            endpoint: chat_endpoint(&config.base_url),
            api_key: config.api_key,
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

pub(crate) fn chat_endpoint(base: &str) -> String {
    let base = base.trim_end_matches('/');
    if base.ends_with("/chat/completions") {
        base.to_string()
    } else if base.ends_with("/v1") {
        format!("{base}/chat/completions")
    } else {
        format!("{base}/v1/chat/completions")
    }
}

pub(crate) fn wire_body(req: &ChatRequest) -> Value {
    let messages: Vec<Value> = req
        .messages
        .iter()
        .map(|m| {
            let role = match m.role {
                Role::System => "system",
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            json!({"role": role, "content": m.content})
        })
        .collect();
    json!({
        "model": req.model_id,
        "messages": messages,
        "temperature": req.sampling.temperature,
        "top_p": req.sampling.top_p,
        "repetition_penalty": req.sampling.repetition_penalty,
        "max_tokens": req.sampling.max_tokens,
        "stream": false,
    })
}

pub(crate) fn parse_completion(body: &Value) -> Result<(String, Usage), BackendError> {
    let text = body
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::Transient(format!("response without choices[0].message.content: {body}")))?;
    let usage = Usage {
        prompt_tokens: body.pointer("/usage/prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
        completion_tokens: body.pointer("/usage/completion_tokens").and_then(Value::as_u64).unwrap_or(0),
    };
    Ok((text.to_string(), usage))
}

impl ChatBackend for HttpBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Http
    }

    fn send(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let mut builder = self.client.post(&self.endpoint).json(&wire_body(req));
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder.send().map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| BackendError::Transient(e.to_string()))?;
        match status.as_u16() {
            200..=299 => {}
            401 | 403 => return Err(BackendError::Auth(text)),
            // Rate limiting is retried like a transport failure.
            429 => return Err(BackendError::Transient(format!("429: {text}"))),
            s @ 400..=499 => return Err(BackendError::Client { status: s, body: text }),
            s => return Err(BackendError::Transient(format!("{s}: {text}"))),
        }
        let body: Value =
            serde_json::from_str(&text).map_err(|e| BackendError::Transient(format!("invalid JSON body: {e}")))?;
        let (text, usage) = parse_completion(&body)?;
        Ok(ChatResponse {
            text,
            usage,
            latency_ms: 0,
            backend: BackendKind::Http,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_normalization() {
        assert_eq!(chat_endpoint("http://h:1"), "http://h:1/v1/chat/completions");
        assert_eq!(chat_endpoint("http://h:1/v1/"), "http://h:1/v1/chat/completions");
        assert_eq!(chat_endpoint("http://h/v1/chat/completions"), "http://h/v1/chat/completions");
    }

    #[test]
    fn wire_format() {
        let r = ChatRequest::system_user("s", "gpt", "sys", "hello".into());
        let b = wire_body(&r);
        assert_eq!(b["model"], "gpt");
        assert_eq!(b["messages"][0]["role"], "system");
        assert_eq!(b["messages"][1]["content"], "hello");
        assert_eq!(b["temperature"], 0.3);
        assert_eq!(b["top_p"], 0.9);
    }

    #[test]
    fn completion_parsing() {
        let body = json!({"choices": [{"message": {"role": "assistant", "content": "hi"}}], "usage": {"prompt_tokens": 4, "completion_tokens": 1}});
        let (t, u) = parse_completion(&body).unwrap();
        assert_eq!(t, "hi");
        assert_eq!(u.total(), 5);
        assert!(parse_completion(&json!({})).is_err());
    }
}

use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("no JSON payload found in model output: {excerpt}")]
pub struct ParseFailure {
    pub text: String,
    excerpt: String,
}

impl ParseFailure {
    pub fn new(text: &str) -> Self {
        let excerpt: String = text.chars().take(120).collect();
        Self { text: text.to_string(), excerpt }
    }
}

/// Pulls the first balanced JSON object (or, failing that, array) out of
/// free-form model output. Markdown fences and surrounding prose are ignored.
pub fn extract_json_payload(text: &str) -> Result<Value, ParseFailure> {
    let trimmed = text.trim();
    if let Ok(v) = serde_json::from_str::<Value>(trimmed) {
        if v.is_object() || v.is_array() {
            return Ok(v);
        }
    }
    if let Some(inner) = fenced_block(trimmed) {
        if let Ok(v) = serde_json::from_str::<Value>(inner.trim()) {
            if v.is_object() || v.is_array() {
                return Ok(v);
            }
        }
    }
    first_balanced(trimmed, b'{', b'}')
        .or_else(|| first_balanced(trimmed, b'[', b']'))
        .ok_or_else(|| ParseFailure::new(text))
}

fn fenced_block(text: &str) -> Option<&str> {
    let start = text.find("```")?;
    let after = &text[start + 3..];
    let body_start = after.find('\n').map(|i| i + 1).unwrap_or(0);
    let body = &after[body_start..];
    let end = body.find("```")?;
    Some(&body[..end])
}

/// Tries every `open` position in order and returns the first slice that is
/// balanced (string-aware) and parses.
fn first_balanced(text: &str, open: u8, close: u8) -> Option<Value> {
    let bytes = text.as_bytes();
    for (start, _) in bytes.iter().enumerate().filter(|(_, b)| **b == open) {
        let mut depth = 0usize;
        let mut in_str = false;
        let mut escaped = false;
        for (i, &b) in bytes.iter().enumerate().skip(start) {
            if in_str {
                if escaped {
                    escaped = false;
                } else if b == b'\\' {
                    escaped = true;
                } else if b == b'"' {
                    in_str = false;
                }
                continue;
            }
            if b == b'"' {
                in_str = true;
            } else if b == open {
                depth += 1;
            } else if b == close {
                depth -= 1;
                if depth == 0 {
                    if let Ok(v) = serde_json::from_str::<Value>(&text[start..=i]) {
                        return Some(v);
                    }
                    break;
                }
            }
        }
    }
    None
}

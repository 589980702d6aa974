//! Action / Observation message protocol shared by the agentic loops.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::gateway::{extract_json_payload, ChatMessage, ChatRequest, Gateway, GatewayError, ParseFailure};

pub const OBSERVATION_PREFIX: &str = "Observation: ";
pub const FINAL_ANSWER: &str = "final_answer";
const WASTED_STEP: &str = "Error: no valid Action JSON was found in your reply, this step is wasted. Reply with `Action:` followed by a JSON object with `name` and `arguments`.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub name: String,
    #[serde(default)]
    pub arguments: Value,
}

impl Action {
    pub fn new(name: impl Into<String>, arguments: Value) -> Self {
        Self {
            name: name.into(),
            arguments,
        }
    }

    pub fn render(&self) -> String {
        format!("Action:\n{}", json!({"name": self.name, "arguments": self.arguments}))
    }

    /// String-valued argument, also accepting a bare string as the whole input.
    pub fn arg_str(&self, key: &str) -> Option<&str> {
        match &self.arguments {
            Value::Object(m) => m.get(key).and_then(Value::as_str),
            Value::String(s) => Some(s),
            _ => None,
        }
    }
}

/// Parses the JSON action blob following `Action:` (or anywhere in the text).
pub fn parse_action(text: &str) -> Result<Action, ParseFailure> {
    let body = match text.find("Action:") {
        Some(i) => &text[i + "Action:".len()..],
        None => text,
    };
    let v = extract_json_payload(body)?;
    let name = v
        .get("name")
        .and_then(Value::as_str)
        .ok_or_else(|| ParseFailure::new(text))?;
    Ok(Action {
        name: name.to_string(),
        arguments: v.get("arguments").cloned().unwrap_or(Value::Null),
    })
}

pub fn observation(text: &str) -> String {
    format!("{OBSERVATION_PREFIX}{text}")
}

/// Strips the observation prefix from a user turn.
pub fn observation_text(message: &str) -> &str {
    message.strip_prefix(OBSERVATION_PREFIX).unwrap_or(message)
}

/// One step of an agentic loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    /// `None` when the reply could not be parsed even after the re-ask.
    pub action: Option<Action>,
    pub raw: String,
    pub observation: String,
}

pub enum Handled {
    Continue(String),
    Finish(String),
}

pub trait ActionHandler {
    fn handle(&mut self, action: &Action) -> Handled;
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopOutcome {
    pub transcript: Vec<Turn>,
    pub finished: bool,
}

/// Drives an Action/Observation conversation for at most `budget` steps.
///
/// An unparseable reply is re-asked once; if the second reply is also
/// unparseable the step counts against the budget with an error observation.
pub fn run_loop(
    gateway: &Gateway,
    stage: &str,
    system: &str,
    user: String,
    budget: usize,
    handler: &mut dyn ActionHandler,
) -> Result<LoopOutcome, GatewayError> {
    let mut messages = vec![ChatMessage::system(system), ChatMessage::user(user)];
    let mut transcript = Vec::new();
    for _ in 0..budget {
        let req = ChatRequest::new(stage, gateway.model_id(), messages.clone());
        let first = gateway.complete(&req)?.text;
        let (raw, action) = match parse_action(&first) {
            Ok(a) => (first, Some(a)),
            Err(_) => {
                let mut retry = req.clone();
                retry.messages.push(ChatMessage::assistant(first));
                retry.messages.push(ChatMessage::user(format!(
                    "{}{}",
                    OBSERVATION_PREFIX,
                    crate::prompts::JSON_REMINDER
                )));
                retry.tags.insert("retry".into(), "action".into());
                let second = gateway.complete(&retry)?.text;
                let parsed = parse_action(&second).ok();
                (second, parsed)
            }
        };
        let (obs, done) = match &action {
            None => (WASTED_STEP.to_string(), false),
            Some(a) => match handler.handle(a) {
                Handled::Continue(o) => (o, false),
                Handled::Finish(o) => (o, true),
            },
        };
        messages.push(ChatMessage::assistant(raw.clone()));
        messages.push(ChatMessage::user(observation(&obs)));
        transcript.push(Turn {
            action,
            raw,
            observation: obs,
        });
        if done {
            return Ok(LoopOutcome {
                transcript,
                finished: true,
            });
        }
    }
    Ok(LoopOutcome {
        transcript,
        finished: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let a = Action::new("search", json!({"q": "x"}));
        assert_eq!(parse_action(&a.render()).unwrap(), a);
        let fenced = "Thought: try it\nAction:\n```json\n{\"name\": \"final_answer\", \"arguments\": \"done\"}\n```";
        let b = parse_action(fenced).unwrap();
        assert_eq!(b.name, FINAL_ANSWER);
        assert_eq!(b.arg_str("answer"), Some("done"));
        assert!(parse_action("no action").is_err());
        assert!(parse_action("Action: {\"arguments\": {}}").is_err());
    }

    struct Echo;
    impl ActionHandler for Echo {
        fn handle(&mut self, a: &Action) -> Handled {
            if a.name == FINAL_ANSWER {
                Handled::Finish("done".into())
            } else {
                Handled::Continue(format!("saw {}", a.name))
            }
        }
    }

    #[test]
    fn reask_then_waste() {
        use crate::gateway::{ScriptBook, ScriptEntry, ScriptMatcher};
        let fin = Action::new(FINAL_ANSWER, json!({"answer": "ok"})).render();
        let book = ScriptBook::from_entries(vec![
            ScriptEntry::new(ScriptMatcher::stage("t").at_turn(0), "garbage"),
            ScriptEntry::new(ScriptMatcher::stage("t").at_turn(1), "still garbage"),
            ScriptEntry::new(ScriptMatcher::stage("t").at_turn(2), fin.clone()),
            ScriptEntry::new(ScriptMatcher::stage("t").at_turn(3), fin),
        ]);
        let g = Gateway::mock(book);
        let out = run_loop(&g, "t", "sys", "go".into(), 5, &mut Echo).unwrap();
        assert!(out.finished);
        assert_eq!(out.transcript.len(), 2);
        assert!(out.transcript[0].action.is_none());
        assert_eq!(out.transcript[0].observation, WASTED_STEP);
        assert_eq!(g.calls_used(), 4);
        // a reply that parses on re-ask costs no extra step
        let book = ScriptBook::from_entries(vec![
            ScriptEntry::new(ScriptMatcher::stage("t").at_turn(0), "garbage"),
            ScriptEntry::new(
                ScriptMatcher::stage("t").at_turn(1),
                Action::new(FINAL_ANSWER, json!("x")).render(),
            ),
        ]);
        let out = run_loop(&Gateway::mock(book), "t", "sys", "go".into(), 1, &mut Echo).unwrap();
        assert!(out.finished);
        assert_eq!(out.transcript.len(), 1);
    }
}

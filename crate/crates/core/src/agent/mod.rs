//! Tool-using agent policies: `a_t, p_t = F_agent(x_t, A)`.
//!
//! [`RuleAgent`] is a deterministic stand-in used for offline runs; [`LlmAgent`]
//! renders the selection / parameter / response-processing prompts and
//! delegates to a [`Gateway`](crate::gateway::Gateway).

mod llm;
mod rule;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::gateway::{stage, Gateway, GatewayError};
use crate::prompts;
use crate::types::{
    DescriptionLevel, DescriptionStore, JsonObject, ParameterSchema, ToolCollection, ToolInterface, ToolRef,
    ToolResponse,
};

pub use llm::LlmAgent;
pub(crate) use llm::tools_info;
pub use rule::{
    digest_line, find_in_context, parse_constraints, tokens, Constraint, ConstraintRule, RuleAgent, RESULT_MARKER,
};

/// A tool as presented to an agent: identity, the description at the level
/// under evaluation, and the declared schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolView {
    pub tool: ToolRef,
    pub description: String,
    pub schema: ParameterSchema,
}

impl ToolView {
    pub fn new(tool: &ToolInterface, description: impl Into<String>) -> Self {
        Self {
            tool: tool.tool_ref(),
            description: description.into(),
            schema: tool.schema.clone(),
        }
    }

    pub fn original(tool: &ToolInterface) -> Self {
        Self::new(tool, tool.description.clone())
    }
}

/// Levels consulted, in order, when a tool lacks the requested one.
pub fn fallback_chain(level: DescriptionLevel) -> &'static [DescriptionLevel] {
    use DescriptionLevel::*;
    match level {
        D0 => &[D0],
        D1 => &[D1, D0],
        D2 => &[D2, D1, D0],
        Generated => &[Generated, D0],
    }
}

/// Views of every tool in `collection` at `level`, falling back along
/// [`fallback_chain`] and finally to the collection's own description.
pub fn tool_views(
    collection: &ToolCollection,
    store: Option<&DescriptionStore>,
    level: DescriptionLevel,
) -> BTreeMap<ToolRef, ToolView> {
    collection
        .iter()
        .map(|t| {
            let r = t.tool_ref();
            let text = store
                .and_then(|s| fallback_chain(level).iter().find_map(|l| s.get(&r, *l)))
                .map(|v| v.text.clone())
                .unwrap_or_else(|| t.description.clone());
            (r, ToolView::new(t, text))
        })
        .collect()
}

/// Phrases marking a subtask that only works on data already gathered.
pub const PROCESSING_PHRASES: &[&str] = &[
    "from the results",
    "from the list",
    "based on the",
    "select one",
    "pick the",
    "count how many",
    "compare the",
];

pub fn is_processing_subtask(text: &str) -> bool {
    let lower = text.to_ascii_lowercase();
    PROCESSING_PHRASES.iter().any(|p| lower.contains(p))
}

/// One planned subtask of a query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedSubtask {
    pub text: String,
    pub needs_api: bool,
    /// API the planner thinks the subtask needs, if it named one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_hint: Option<ToolRef>,
}

/// Splits a request into clauses joined by "then".
pub fn split_subtasks(query: &str) -> Vec<String> {
    query
        .trim()
        .trim_end_matches('.')
        .split(", then ")
        .flat_map(|s| s.split(". Then "))
        .map(|s| {
            let s = s.trim();
            let mut c = s.chars();
            match c.next() {
                Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
                None => String::new(),
            }
        })
        .filter(|s| !s.is_empty())
        .collect()
}

/// Decomposes `query` and labels each subtask with the subtask-annotation
/// prompt, one model call per subtask.
pub fn llm_plan(gateway: &Gateway, query: &str, candidates: &[ToolView]) -> Result<Vec<PlannedSubtask>, AgentError> {
    let req = gateway.request(stage::DECOMPOSE, prompts::DECOMPOSE_SYSTEM, prompts::decompose_user(query));
    let v = gateway.complete_json(&req)?;
    let subtasks: Vec<String> = v
        .get("subtasks")
        .and_then(Value::as_array)
        .ok_or_else(|| AgentError::Malformed(format!("decomposition without subtasks: {v}")))?
        .iter()
        .map(|s| match s {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        })
        .collect();
    let info = llm::tools_info(candidates);
    let mut out = Vec::with_capacity(subtasks.len());
    let mut previous: Vec<String> = Vec::new();
    for text in subtasks {
        let req = gateway.request(
            stage::ANNOTATE_SUBTASK,
            prompts::SUBTASK_ANNOTATION_SYSTEM,
            prompts::subtask_annotation_user(query, &text, &previous.join("; "), &info),
        );
        let a = gateway.complete_json(&req)?;
        let needs_api = match a.get("needs_api") {
            Some(Value::Bool(b)) => *b,
            Some(Value::String(s)) => s.eq_ignore_ascii_case("true"),
            _ => true,
        };
        let api = a.get("api_name").and_then(Value::as_str).unwrap_or("");
        let provider = a.get("provider").and_then(Value::as_str);
        let api_hint = candidates
            .iter()
            .find(|c| c.tool.api_name == api && provider.is_none_or(|p| p == c.tool.provider_id))
            .or_else(|| candidates.iter().find(|c| c.tool.api_name == api))
            .map(|c| c.tool.clone());
        previous.push(text.clone());
        out.push(PlannedSubtask {
            text,
            needs_api,
            api_hint: if needs_api { api_hint } else { None },
        });
    }
    Ok(out)
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("malformed agent output: {0}")]
    Malformed(String),
    #[error("no candidate tools")]
    NoCandidates,
}

pub trait Agent: Send + Sync {
    fn name(&self) -> &str;

    /// Ordered subtasks for a free (not teacher-forced) run.
    fn plan(&self, query: &str, _candidates: &[ToolView]) -> Result<Vec<PlannedSubtask>, AgentError> {
        Ok(split_subtasks(query)
            .into_iter()
            .map(|text| PlannedSubtask {
                needs_api: !is_processing_subtask(&text),
                text,
                api_hint: None,
            })
            .collect())
    }

    /// Picks exactly one candidate for the subtask.
    fn select_tool(&self, subtask: &str, context: &[String], candidates: &[ToolView]) -> Result<ToolRef, AgentError>;

    /// Builds call arguments for `tool`.
    fn generate_params(&self, subtask: &str, context: &[String], tool: &ToolView) -> Result<JsonObject, AgentError>;

    /// Turns a tool response (or, for processing steps, nothing) into the
    /// context entry handed to later subtasks.
    fn process_response(
        &self,
        step: usize,
        subtask: &str,
        context: &[String],
        response: Option<&ToolResponse>,
    ) -> Result<String, AgentError>;
}

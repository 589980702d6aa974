use std::sync::Arc;

use serde_json::{json, Value};

use super::{llm_plan, Agent, AgentError, PlannedSubtask, ToolView};
use crate::gateway::{stage, Gateway};
use crate::prompts;
use crate::types::{JsonObject, ToolRef, ToolResponse};

/// Agent backed by a chat model through the gateway.
pub struct LlmAgent {
    gateway: Arc<Gateway>,
}

impl LlmAgent {
    pub fn new(gateway: Arc<Gateway>) -> Self {
        Self { gateway }
    }
}

pub(crate) fn tools_info(candidates: &[ToolView]) -> Value {
    Value::Array(
        candidates
            .iter()
            .map(|c| {
                json!({
                    "api_name": c.tool.api_name,
                    "provider": c.tool.provider_id,
                    "description": c.description,
                })
            })
            .collect(),
    )
}

pub(crate) fn api_instruction(tool: &ToolView) -> Value {
    json!({
        "api_name": tool.tool.api_name,
        "provider": tool.tool.provider_id,
        "description": tool.description,
        "required_parameters": tool.schema.parameters.iter().filter(|p| p.required).collect::<Vec<_>>(),
        "optional_parameters": tool.schema.parameters.iter().filter(|p| !p.required).collect::<Vec<_>>(),
    })
}

fn context_section(context: &[String]) -> String {
    if context.is_empty() {
        "(none)".to_string()
    } else {
        context.join("\n")
    }
}

impl Agent for LlmAgent {
    fn name(&self) -> &str {
        "llm"
    }

    fn plan(&self, query: &str, candidates: &[ToolView]) -> Result<Vec<PlannedSubtask>, AgentError> {
        llm_plan(&self.gateway, query, candidates)
    }

    fn select_tool(&self, subtask: &str, context: &[String], candidates: &[ToolView]) -> Result<ToolRef, AgentError> {
        if candidates.is_empty() {
            return Err(AgentError::NoCandidates);
        }
        let req = self.gateway.request(
            stage::SELECT_TOOL,
            prompts::SELECT_SYSTEM,
            prompts::select_user(&tools_info(candidates), &context_section(context), subtask),
        );
        let v = self.gateway.complete_json(&req)?;
        let sel = v.get("selected_api").unwrap_or(&v);
        let api = sel
            .get("api_name")
            .and_then(Value::as_str)
            .ok_or_else(|| AgentError::Malformed(format!("selection without api_name: {v}")))?;
        let provider = sel.get("provider").and_then(Value::as_str);
        candidates
            .iter()
            .find(|c| c.tool.api_name == api && provider.is_none_or(|p| p == c.tool.provider_id))
            .or_else(|| candidates.iter().find(|c| c.tool.api_name == api))
            .map(|c| c.tool.clone())
            .ok_or_else(|| AgentError::Malformed(format!("selected unknown api `{api}`")))
    }

    fn generate_params(&self, subtask: &str, context: &[String], tool: &ToolView) -> Result<JsonObject, AgentError> {
        let req = self.gateway.request(
            stage::GENERATE_PARAMS,
            prompts::PARAMS_SYSTEM,
            prompts::params_user(&context_section(context), &api_instruction(tool), subtask),
        );
        let v = self.gateway.complete_json(&req)?;
        match v.get("Parameters").or_else(|| v.get("parameters")) {
            Some(Value::Object(m)) => Ok(m.clone()),
            Some(Value::Null) | None => Ok(JsonObject::new()),
            Some(other) => Err(AgentError::Malformed(format!("Parameters is not an object: {other}"))),
        }
    }

    fn process_response(
        &self,
        _step: usize,
        subtask: &str,
        context: &[String],
        response: Option<&ToolResponse>,
    ) -> Result<String, AgentError> {
        let call_result = match response {
            Some(r) if !r.is_ok() => return Ok(r.observation()),
            Some(r) => r.observation(),
            None => "(no API call for this subtask)".to_string(),
        };
        let req = self.gateway.request(
            stage::PROCESS_RESPONSE,
            prompts::PROCESS_SYSTEM,
            prompts::process_user(&context_section(context), subtask, &call_result),
        );
        Ok(self.gateway.complete(&req)?.text.replace('\n', " "))
    }
}

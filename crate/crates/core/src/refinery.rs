//! Description refinement (D0 -> D1 -> D2), failure-rule extraction and
//! retrieval, the description generator, and the schema-repair agent.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::gateway::simulated::value_for;
use crate::gateway::{stage, Gateway, GatewayError};
use crate::prompts::{self, provider_schema_json, schema_inputs, tool_calling_line};
use crate::react::{run_loop, Action, ActionHandler, Handled, Turn, FINAL_ANSWER};
use crate::sandbox::ToolEnvironment;
use crate::types::{
    DescriptionLevel, DescriptionStore, DescriptionVersion, JsonObject, ParamSpec, ParamType, ParameterSchema,
    Provenance, Query, ToolCollection, ToolInterface, ToolRef, ToolTraceSummary, Trace,
};

pub const DEFAULT_RULE_CAP: usize = 5;
pub const DEFAULT_REPAIR_BUDGET: usize = 40;

#[derive(Debug, thiserror::Error)]
pub enum RefineryError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("model output has no description: {0}")]
    NoDescription(String),
    #[error("expected a {expected} description for {tool}, got {found}")]
    WrongLevel {
        tool: ToolRef,
        expected: &'static str,
        found: &'static str,
    },
    #[error("unknown provider `{0}`")]
    UnknownProvider(String),
    #[error("step budget must be at least 1")]
    ZeroBudget,
}

/// A description-generation failure; the tool keeps its previous level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineFailure {
    pub tool: ToolRef,
    pub level: DescriptionLevel,
    pub error: String,
}

fn provenance(op: &str, gateway: &Gateway, rule_ids: Vec<String>) -> Provenance {
    Provenance {
        source_op: op.to_string(),
        model_id: gateway.model_id().to_string(),
        rule_ids,
    }
}

fn description_from(v: &Value) -> Result<String, RefineryError> {
    v.get("description")
        .and_then(Value::as_str)
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .ok_or_else(|| RefineryError::NoDescription(v.to_string()))
}

/// Guideline-based rewrite of the original description.
pub fn generate_d1(tool: &ToolInterface, gateway: &Gateway) -> Result<DescriptionVersion, RefineryError> {
    let req = gateway.request(
        stage::REFINE_D1,
        prompts::DESCRIPTION_SYSTEM,
        prompts::refine_d1_user(&tool.api_name, &tool.schema, &tool.description),
    );
    let text = description_from(&gateway.complete_json(&req)?)?;
    Ok(DescriptionVersion {
        tool: tool.tool_ref(),
        level: DescriptionLevel::D1,
        text,
        provenance: provenance("generate_d1", gateway, Vec::new()),
    })
}

/// D1 for every tool in parallel; failures keep D0 and are returned.
pub fn refine_d1_all(collection: &ToolCollection, store: &mut DescriptionStore, gateway: &Gateway) -> Vec<RefineFailure> {
    let results: Vec<_> = collection.tools().par_iter().map(|t| (t.tool_ref(), generate_d1(t, gateway))).collect();
    let mut failures = Vec::new();
    for (tool, r) in results {
        match r {
            Ok(v) => store.insert(v),
            Err(e) => {
                log::warn!("D1 for {tool} failed, keeping D0: {e}");
                failures.push(RefineFailure {
                    tool,
                    level: DescriptionLevel::D1,
                    error: e.to_string(),
                });
            }
        }
    }
    failures
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    ParamConstraint,
    Ordering,
    ResponseAssumption,
    Other,
}

impl RuleKind {
    fn parse(s: &str) -> Self {
        match s.trim().to_ascii_lowercase().as_str() {
            "param_constraint" => Self::ParamConstraint,
            "ordering" => Self::Ordering,
            "response_assumption" => Self::ResponseAssumption,
            _ => Self::Other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSource {
    pub query_id: String,
    pub step: usize,
    pub failed_tool: Option<ToolRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageRule {
    pub rule_id: String,
    pub text: String,
    pub source: RuleSource,
    pub applies_to: Vec<ToolRef>,
    pub kind: RuleKind,
}

/// Lowercased, whitespace-collapsed text without a trailing period.
pub fn normalize_rule(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .trim_end_matches('.')
        .to_lowercase()
}

fn evidence(trace: &Trace, query: Option<&Query>, failed: usize, collection: &ToolCollection) -> Value {
    let step = &trace.steps[failed];
    let tool = step.selected_tool.as_ref().or(step.gt_tool.as_ref());
    let mut gt_steps: Vec<usize> = trace.steps.iter().filter(|s| s.needs_api).map(|s| s.index).collect();
    gt_steps.resize(trace.ground_truth_sequence.len().max(gt_steps.len()), usize::MAX);
    let ground_truth: Vec<Value> = trace
        .ground_truth_sequence
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let ex = collection.get(r).and_then(|t| t.examples.iter().find(|e| e.success));
            json!({
                "step": if gt_steps[i] == usize::MAX { i } else { gt_steps[i] },
                "api_name": r.api_name,
                "provider": r.provider_id,
                "example_arguments": ex.map(|e| Value::Object(e.arguments.clone())).unwrap_or(Value::Null),
                "example_response": ex.map(|e| e.response_digest.clone()).unwrap_or_default(),
            })
        })
        .collect();
    json!({
        "query": query.map(|q| q.text.as_str()).unwrap_or(""),
        "failed_step": {
            "index": step.index,
            "subtask": step.input,
            "api_name": tool.map(|t| t.api_name.as_str()).unwrap_or(""),
            "provider": tool.map(|t| t.provider_id.as_str()).unwrap_or(""),
            "parameters": step.parameters,
            "error": step.output.observation(),
        },
        "ground_truth": ground_truth,
    })
}

struct RawRule {
    text: String,
    applies_to: ToolRef,
    kind: RuleKind,
    source: RuleSource,
}

fn rules_for_step(
    trace: &Trace,
    failed: usize,
    query: Option<&Query>,
    collection: &ToolCollection,
    gateway: &Gateway,
) -> Result<Vec<RawRule>, GatewayError> {
    let step = &trace.steps[failed];
    let ev = evidence(trace, query, failed, collection);
    let req = gateway.request(stage::EXTRACT_RULES, prompts::RULES_SYSTEM, prompts::extract_rules_user(&ev));
    let v = gateway.complete_json(&req)?;
    let entries = v.get("rules").and_then(Value::as_array).cloned().unwrap_or_default();
    let provider = step
        .selected_tool
        .as_ref()
        .or(step.gt_tool.as_ref())
        .map(|t| t.provider_id.clone())
        .unwrap_or_default();
    let mut out = Vec::new();
    for e in entries {
        let text = e.get("text").and_then(Value::as_str).map(str::trim).unwrap_or("");
        let api = e.get("applies_to").and_then(Value::as_str).unwrap_or("");
        let r = ToolRef::new(&provider, api);
        if text.is_empty() || collection.get(&r).is_none() {
            log::debug!("{}: dropping rule entry {e}", trace.query_id);
            continue;
        }
        out.push(RawRule {
            text: text.to_string(),
            applies_to: r,
            kind: RuleKind::parse(e.get("kind").and_then(Value::as_str).unwrap_or("other")),
            source: RuleSource {
                query_id: trace.query_id.clone(),
                step: step.index,
                failed_tool: step.selected_tool.clone(),
            },
        });
    }
    Ok(out)
}

/// One distillation call per failed step of the trace, in step order.
fn rules_for_trace(
    trace: &Trace,
    query: Option<&Query>,
    collection: &ToolCollection,
    gateway: &Gateway,
) -> Result<Vec<RawRule>, GatewayError> {
    let mut out = Vec::new();
    for (i, _) in trace.steps.iter().enumerate().filter(|(_, s)| s.needs_api && !s.output.is_ok()) {
        out.extend(rules_for_step(trace, i, query, collection, gateway)?);
    }
    Ok(out)
}

/// Distills every failed step of every trace; rules are deduplicated by
/// normalized text per tool and numbered in trace order.
pub fn extract_rules(
    traces: &[Trace],
    queries: &BTreeMap<String, Query>,
    collection: &ToolCollection,
    gateway: &Gateway,
) -> Vec<UsageRule> {
    let per_trace: Vec<Vec<RawRule>> = traces
        .par_iter()
        .map(|t| {
            rules_for_trace(t, queries.get(&t.query_id), collection, gateway).unwrap_or_else(|e| {
                log::warn!("rule extraction for {} failed: {e}", t.query_id);
                Vec::new()
            })
        })
        .collect();
    let mut seen: BTreeSet<(ToolRef, String)> = BTreeSet::new();
    let mut out = Vec::new();
    for raw in per_trace.into_iter().flatten() {
        if !seen.insert((raw.applies_to.clone(), normalize_rule(&raw.text))) {
            continue;
        }
        out.push(UsageRule {
            rule_id: format!("rule-{:04}", out.len() + 1),
            text: raw.text,
            source: raw.source,
            applies_to: vec![raw.applies_to],
            kind: raw.kind,
        });
    }
    out
}

/// Rules attached to `tool`, ordered by `(kind, rule_id)`, at most `cap`.
pub fn retrieve_rules(tool: &ToolRef, library: &[UsageRule], cap: usize) -> Vec<UsageRule> {
    let mut hits: Vec<UsageRule> = library.iter().filter(|r| r.applies_to.contains(tool)).cloned().collect();
    hits.sort_by(|a, b| (a.kind, &a.rule_id).cmp(&(b.kind, &b.rule_id)));
    hits.truncate(cap);
    hits
}

/// Folds retrieved rules into D1. With no rules, D1 is passed through
/// without a model call.
pub fn generate_d2(
    tool: &ToolInterface,
    d1: &DescriptionVersion,
    rules: &[UsageRule],
    gateway: &Gateway,
) -> Result<DescriptionVersion, RefineryError> {
    if d1.level != DescriptionLevel::D1 {
        return Err(RefineryError::WrongLevel {
            tool: d1.tool.clone(),
            expected: "d1",
            found: d1.level.as_str(),
        });
    }
    if rules.is_empty() {
        return Ok(DescriptionVersion {
            tool: tool.tool_ref(),
            level: DescriptionLevel::D2,
            text: d1.text.clone(),
            provenance: provenance("generate_d2_passthrough", gateway, Vec::new()),
        });
    }
    let texts: Vec<&str> = rules.iter().map(|r| r.text.as_str()).collect();
    let req = gateway.request(
        stage::REFINE_D2,
        prompts::DESCRIPTION_SYSTEM,
        prompts::refine_d2_user(&tool.api_name, &d1.text, &json!(texts)),
    );
    let text = description_from(&gateway.complete_json(&req)?)?;
    Ok(DescriptionVersion {
        tool: tool.tool_ref(),
        level: DescriptionLevel::D2,
        text,
        provenance: provenance("generate_d2", gateway, rules.iter().map(|r| r.rule_id.clone()).collect()),
    })
}

/// D2 for every tool that has a D1; failures keep D1 and are returned.
pub fn refine_d2_all(
    collection: &ToolCollection,
    store: &mut DescriptionStore,
    library: &[UsageRule],
    cap: usize,
    gateway: &Gateway,
) -> Vec<RefineFailure> {
    let jobs: Vec<(&ToolInterface, DescriptionVersion)> = collection
        .iter()
        .filter_map(|t| store.get(&t.tool_ref(), DescriptionLevel::D1).map(|d| (t, d.clone())))
        .collect();
    let results: Vec<_> = jobs
        .par_iter()
        .map(|(t, d1)| {
            let rules = retrieve_rules(&t.tool_ref(), library, cap);
            (t.tool_ref(), generate_d2(t, d1, &rules, gateway))
        })
        .collect();
    let mut failures = Vec::new();
    for (tool, r) in results {
        match r {
            Ok(v) => store.insert(v),
            Err(e) => {
                log::warn!("D2 for {tool} failed, keeping D1: {e}");
                failures.push(RefineFailure {
                    tool,
                    level: DescriptionLevel::D2,
                    error: e.to_string(),
                });
            }
        }
    }
    failures
}

/// Generator prompt for one tool: trace-based when a summary is given.
pub fn generator_prompt(tool: &ToolInterface, summary: Option<&ToolTraceSummary>) -> String {
    let block = summary.map(prompts::trace_block);
    prompts::generator_user(&tool.api_name, &tool.schema, &tool.description, block.as_deref())
}

/// Description from the generator model (the `generated` level).
pub fn generate_description(
    tool: &ToolInterface,
    summary: Option<&ToolTraceSummary>,
    gateway: &Gateway,
) -> Result<DescriptionVersion, RefineryError> {
    let req = gateway.request(
        stage::GENERATE_DESCRIPTION,
        prompts::DESCRIPTION_SYSTEM,
        generator_prompt(tool, summary),
    );
    let text = description_from(&gateway.complete_json(&req)?)?;
    let op = if summary.is_some() { "generate_trace_based" } else { "generate_trace_free" };
    Ok(DescriptionVersion {
        tool: tool.tool_ref(),
        level: DescriptionLevel::Generated,
        text,
        provenance: provenance(op, gateway, Vec::new()),
    })
}

// ---- schema repair ----

pub const UPDATE_PROVIDER_DESCRIPTION: &str = "utility_update_provider_description";
pub const UPDATE_API_DESCRIPTION: &str = "utility_update_api_description";
pub const UPDATE_API_PARAMETERS: &str = "utility_update_api_parameters";
pub const REMOVE_API_PARAMETERS: &str = "utility_remove_api_parameters";
pub const PRINT_SCHEMA: &str = "utility_print_schema";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum SchemaChange {
    ProviderDescription { text: String },
    ApiDescription { api_name: String, before: String, after: String },
    ApiParameters { api_name: String, before: Vec<ParamSpec>, after: Vec<ParamSpec> },
    RemoveParameters { api_name: String, before: Vec<ParamSpec> },
}

/// A call that failed before repair; replayed by the agent as history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedCall {
    pub api_name: String,
    pub arguments: JsonObject,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationCall {
    pub api_name: String,
    pub arguments: JsonObject,
    pub observation: String,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairSession {
    pub provider_id: String,
    pub transcript: Vec<Turn>,
    pub step_budget: usize,
    pub finished: bool,
    pub schema_diff: Vec<SchemaChange>,
    pub validation: Vec<ValidationCall>,
    pub validated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider_description: Option<String>,
    /// The provider's tools as declared after the session.
    pub repaired: Vec<ToolInterface>,
}

impl RepairSession {
    /// Replaces the provider's declared tools; names are never changed.
    pub fn apply(&self, collection: &mut ToolCollection) {
        for t in &self.repaired {
            if let Some(slot) = collection.get_mut(&t.tool_ref()) {
                slot.description = t.description.clone();
                slot.schema = t.schema.clone();
            }
        }
    }
}

fn spec_from(name: String, spec: &Value) -> Result<ParamSpec, String> {
    let ty = spec
        .get("type")
        .and_then(Value::as_str)
        .and_then(ParamType::parse_loose)
        .ok_or_else(|| format!("parameter '{name}' has no recognizable type"))?;
    Ok(ParamSpec {
        name,
        param_type: ty,
        required: spec.get("required").and_then(Value::as_bool).unwrap_or(false),
        description: spec.get("description").and_then(Value::as_str).unwrap_or("").to_string(),
        default: spec.get("default").cloned(),
        enum_values: spec.get("enum").and_then(Value::as_array).cloned(),
    })
}

/// Parses `parameters_json`: either a list of parameter specs or an object
/// keyed by parameter name.
pub fn parse_parameters(raw: &Value) -> Result<Vec<ParamSpec>, String> {
    let v = match raw {
        Value::String(s) => serde_json::from_str::<Value>(s).map_err(|e| format!("parameters_json is not JSON: {e}"))?,
        other => other.clone(),
    };
    match v {
        Value::Array(items) => items
            .into_iter()
            .map(|i| {
                let name = i.get("name").and_then(Value::as_str).ok_or("parameter entry has no name")?;
                spec_from(name.to_string(), &i)
            })
            .collect(),
        Value::Object(m) => m.into_iter().map(|(name, spec)| spec_from(name, &spec)).collect(),
        _ => Err("parameters_json must be a list or an object".into()),
    }
}

struct Repairer<'a> {
    provider_id: &'a str,
    tools: Vec<ToolInterface>,
    env: &'a dyn ToolEnvironment,
    seed: u64,
    diff: Vec<SchemaChange>,
    provider_description: Option<String>,
}

impl Repairer<'_> {
    fn tool_mut(&mut self, api: &str) -> Option<&mut ToolInterface> {
        self.tools.iter_mut().find(|t| t.api_name == api)
    }

    fn schema(&self) -> Value {
        let refs: Vec<&ToolInterface> = self.tools.iter().collect();
        provider_schema_json(self.provider_id, &refs)
    }
}

impl ActionHandler for Repairer<'_> {
    fn handle(&mut self, a: &Action) -> Handled {
        let api = a.arg_str("api_name").unwrap_or_default().to_string();
        let obs = match a.name.as_str() {
            FINAL_ANSWER => return Handled::Finish("Schema saved.".into()),
            PRINT_SCHEMA => self.schema().to_string(),
            UPDATE_PROVIDER_DESCRIPTION => {
                let text = a.arg_str("description").unwrap_or_default().to_string();
                self.provider_description = Some(text.clone());
                self.diff.push(SchemaChange::ProviderDescription { text });
                "Provider description updated.".into()
            }
            UPDATE_API_DESCRIPTION => {
                let text = a.arg_str("description").unwrap_or_default().to_string();
                match self.tool_mut(&api) {
                    None => format!("Error: unknown API '{api}'"),
                    Some(t) => {
                        let before = std::mem::replace(&mut t.description, text.clone());
                        self.diff.push(SchemaChange::ApiDescription {
                            api_name: api.clone(),
                            before,
                            after: text,
                        });
                        format!("Description of API '{api}' updated.")
                    }
                }
            }
            UPDATE_API_PARAMETERS => {
                let raw = a.arguments.get("parameters_json").or_else(|| a.arguments.get("parameters"));
                match (raw.map(parse_parameters), self.tool_mut(&api)) {
                    (_, None) => format!("Error: unknown API '{api}'"),
                    (None, _) => "Error: missing `parameters_json`".into(),
                    (Some(Err(e)), _) => format!("Error: {e}"),
                    (Some(Ok(params)), Some(t)) => {
                        let after = ParameterSchema::new(params);
                        match after.validate() {
                            Err(e) => format!("Error: {e}"),
                            Ok(()) => {
                                let before = std::mem::replace(&mut t.schema, after).parameters;
                                let after = t.schema.parameters.clone();
                                self.diff.push(SchemaChange::ApiParameters {
                                    api_name: api.clone(),
                                    before,
                                    after,
                                });
                                format!("Parameters of API '{api}' updated.")
                            }
                        }
                    }
                }
            }
            REMOVE_API_PARAMETERS => match self.tool_mut(&api) {
                None => format!("Error: unknown API '{api}'"),
                Some(t) => {
                    let before = std::mem::take(&mut t.schema).parameters;
                    self.diff.push(SchemaChange::RemoveParameters {
                        api_name: api.clone(),
                        before,
                    });
                    format!("Parameters field removed from API '{api}'.")
                }
            },
            name => match self.tools.iter().find(|t| t.api_name == name) {
                None => format!("Error: unknown tool '{name}'"),
                Some(t) => match a.arguments.as_object() {
                    None => "Error: arguments must be a JSON object of parameter values".into(),
                    Some(args) => match self.env.invoke(&t.tool_ref(), args, self.seed) {
                        Ok(r) => r.observation(),
                        Err(e) => format!("Error: {e}"),
                    },
                },
            },
        };
        Handled::Continue(obs)
    }
}

fn repair_system_prompt(tools: &[ToolInterface]) -> String {
    let mut lines: Vec<String> = tools
        .iter()
        .map(|t| tool_calling_line(&t.api_name, &t.description, &schema_inputs(&t.schema)))
        .collect();
    let api = json!({"type": "string"});
    lines.push(tool_calling_line(UPDATE_PROVIDER_DESCRIPTION, "Update the provider's description.", &json!({"description": api})));
    lines.push(tool_calling_line(UPDATE_API_DESCRIPTION, "Update an API's description.", &json!({"api_name": api, "description": api})));
    lines.push(tool_calling_line(
        UPDATE_API_PARAMETERS,
        "Replace an API's parameters.",
        &json!({"api_name": api, "parameters_json": {"type": "string", "description": "JSON object keyed by parameter name with type, required and description"}}),
    ));
    lines.push(tool_calling_line(REMOVE_API_PARAMETERS, "Remove the 'parameters' field from an API.", &json!({"api_name": api})));
    lines.push(tool_calling_line(PRINT_SCHEMA, "Show the current schema.", &json!({})));
    lines.push(tool_calling_line(FINAL_ANSWER, "Finish the session.", &json!({"answer": api})));
    prompts::REPAIR_SYSTEM.replace("{tools}", &lines.join("\n"))
}

/// Schema-conformant arguments: every declared parameter with a plausible
/// value for its declared type.
pub fn conformant_args(tool: &ToolInterface) -> JsonObject {
    tool.schema
        .parameters
        .iter()
        .map(|p| {
            let v = p
                .default
                .clone()
                .or_else(|| p.enum_values.as_ref().and_then(|e| e.first().cloned()))
                .unwrap_or_else(|| value_for(p.param_type, &p.description));
            (p.name.clone(), v)
        })
        .collect()
}

/// Runs the repair loop for one provider, then validates the result with a
/// conformant call per API. Server-side failures do not count against
/// validation; any validation error does.
pub fn repair_schema(
    provider_id: &str,
    declared: &ToolCollection,
    env: &dyn ToolEnvironment,
    gateway: &Gateway,
    budget: usize,
    history: &[FailedCall],
    seed: u64,
) -> Result<RepairSession, RefineryError> {
    if budget == 0 {
        return Err(RefineryError::ZeroBudget);
    }
    let tools: Vec<ToolInterface> = declared.provider_tools(provider_id).into_iter().cloned().collect();
    if tools.is_empty() {
        return Err(RefineryError::UnknownProvider(provider_id.to_string()));
    }
    let refs: Vec<&ToolInterface> = tools.iter().collect();
    let mut user = format!("{}{}", prompts::REPAIR_USER, provider_schema_json(provider_id, &refs));
    user.push_str("\n\nHistory:\n");
    if history.is_empty() {
        user.push_str("(none)");
    }
    for h in history {
        user.push_str(&format!(
            "{} {} -> {}\n",
            h.api_name,
            Value::Object(h.arguments.clone()),
            h.error
        ));
    }
    let system = repair_system_prompt(&tools);
    let mut handler = Repairer {
        provider_id,
        tools,
        env,
        seed,
        diff: Vec::new(),
        provider_description: None,
    };
    let outcome = run_loop(gateway, stage::REPAIR_SCHEMA, &system, user, budget, &mut handler)?;
    let mut validation = Vec::new();
    for t in &handler.tools {
        let args = conformant_args(t);
        let (observation, ok) = match env.invoke(&t.tool_ref(), &args, seed) {
            Ok(r) => (r.observation(), !r.status.is_client_error()),
            Err(e) => (format!("Error: {e}"), false),
        };
        validation.push(ValidationCall {
            api_name: t.api_name.clone(),
            arguments: args,
            observation,
            ok,
        });
    }
    let validated = outcome.finished && validation.iter().all(|v| v.ok);
    Ok(RepairSession {
        provider_id: provider_id.to_string(),
        transcript: outcome.transcript,
        step_budget: budget,
        finished: outcome.finished,
        schema_diff: handler.diff,
        validation,
        validated,
        provider_description: handler.provider_description,
        repaired: handler.tools,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::parse_constraints;
    use crate::annotator::{annotate_collection, DEFAULT_BUDGET};
    use crate::gateway::{ScriptBook, ScriptEntry, ScriptMatcher};
    use crate::sandbox::{
        build_synthetic_universe, corrupt_declared_schema, CorruptionSpec, Universe, UniverseConfig,
    };
    use crate::types::{ResponseStatus, TerminalStatus, ToolResponse, TraceStep};

    fn universe() -> (Universe, ToolCollection) {
        let u = build_synthetic_universe(&UniverseConfig::new(2, 3, 2, 3));
        let sb = u.sandbox().unwrap();
        let (c, _) = annotate_collection(&u.collection, &Gateway::simulated(), &sb, DEFAULT_BUDGET, 0).unwrap();
        (u, c)
    }

    #[test]
    fn d1_fallback_and_degenerate_input() {
        let (_, c) = universe();
        let g = Gateway::simulated();
        let t = &c.tools()[1];
        let d1 = generate_d1(t, &g).unwrap();
        assert_eq!(d1.level, DescriptionLevel::D1);
        assert!(d1.text.len() > t.description.len());
        assert!(parse_constraints(&d1.text).is_empty());
        let mut empty = t.clone();
        empty.description.clear();
        assert!(generate_d1(&empty, &g).unwrap().text.starts_with("Calls the"));
        let bad = Gateway::mock(ScriptBook::from_entries(vec![ScriptEntry::new(ScriptMatcher::stage(stage::REFINE_D1), "nope")]));
        let mut store = DescriptionStore::from_collection(&c);
        let fails = refine_d1_all(&c, &mut store, &bad);
        assert_eq!(fails.len(), c.len());
        assert!(!store.has_level(DescriptionLevel::D1));
        assert_eq!(bad.calls_used() as usize, 2 * c.len());
    }

    fn rule(id: &str, tool: &str, kind: RuleKind) -> UsageRule {
        UsageRule {
            rule_id: id.into(),
            text: format!("text {id}"),
            source: RuleSource {
                query_id: "q".into(),
                step: 0,
                failed_tool: None,
            },
            applies_to: vec![ToolRef::new("p", tool)],
            kind,
        }
    }

    #[test]
    fn retrieval_order_and_cap() {
        let mut lib = vec![rule("r2", "x", RuleKind::Other), rule("r1", "x", RuleKind::ParamConstraint), rule("r3", "y", RuleKind::Other)];
        let got = retrieve_rules(&ToolRef::new("p", "x"), &lib, 5);
        assert_eq!(got.iter().map(|r| r.rule_id.as_str()).collect::<Vec<_>>(), ["r1", "r2"]);
        for i in 0..7 {
            lib.push(rule(&format!("s{i}"), "z", RuleKind::Ordering));
        }
        let got = retrieve_rules(&ToolRef::new("p", "z"), &lib, DEFAULT_RULE_CAP);
        assert_eq!(got.iter().map(|r| r.rule_id.as_str()).collect::<Vec<_>>(), ["s0", "s1", "s2", "s3", "s4"]);
        assert!(retrieve_rules(&ToolRef::new("p", "x"), &[], 5).is_empty());
    }

    fn failed_trace(u: &Universe, c: &ToolCollection, qid: &str) -> Trace {
        let p = &c.providers()[0];
        let tools = c.provider_tools(p);
        let gt: Vec<ToolRef> = tools.iter().map(|t| t.tool_ref()).collect();
        let id = tools[1].schema.parameters[0].name.clone();
        let _ = u;
        Trace {
            query_id: qid.into(),
            steps: vec![
                TraceStep {
                    index: 0,
                    input: "search".into(),
                    selected_tool: Some(gt[0].clone()),
                    parameters: Default::default(),
                    output: ToolResponse::ok(json!({})),
                    gt_tool: Some(gt[0].clone()),
                    needs_api: true,
                },
                TraceStep {
                    index: 1,
                    input: "details".into(),
                    selected_tool: Some(gt[1].clone()),
                    parameters: Default::default(),
                    output: ToolResponse::error(
                        ResponseStatus::TypeError(id.clone()),
                        format!("Error: Type error for parameter '{id}': expected integer"),
                    ),
                    gt_tool: Some(gt[1].clone()),
                    needs_api: true,
                },
            ],
            terminal_status: TerminalStatus::Failure,
            ground_truth_sequence: gt,
        }
    }

    #[test]
    fn rules_extracted_deduped_and_folded_into_d2() {
        let (u, c) = universe();
        let g = Gateway::simulated();
        let traces = vec![failed_trace(&u, &c, "a"), failed_trace(&u, &c, "b")];
        let lib = extract_rules(&traces, &BTreeMap::new(), &c, &g);
        assert_eq!(lib.len(), 1);
        assert!(lib[0].text.ends_with("MUST come from previous response"));
        assert!(extract_rules(&[], &BTreeMap::new(), &c, &g).is_empty());

        let mut store = DescriptionStore::from_collection(&c);
        assert!(refine_d1_all(&c, &mut store, &g).is_empty());
        let before = g.calls_used();
        assert!(refine_d2_all(&c, &mut store, &lib, DEFAULT_RULE_CAP, &g).is_empty());
        assert_eq!(g.calls_used() - before, 1, "only the tool with a rule costs a call");
        let target = &lib[0].applies_to[0];
        let d2 = store.get(target, DescriptionLevel::D2).unwrap();
        assert!(d2.text.contains(&lib[0].text));
        assert_eq!(d2.provenance.rule_ids, vec![lib[0].rule_id.clone()]);
        let other = c.refs().into_iter().find(|r| r != target).unwrap();
        assert_eq!(
            store.get(&other, DescriptionLevel::D2).unwrap().text,
            store.get(&other, DescriptionLevel::D1).unwrap().text
        );
        // D0 untouched
        for t in c.iter() {
            assert_eq!(store.get(&t.tool_ref(), DescriptionLevel::D0).unwrap().text, t.description);
        }
        let d0 = DescriptionVersion::original(&c.tools()[0]);
        assert!(matches!(generate_d2(&c.tools()[0], &d0, &lib, &g), Err(RefineryError::WrongLevel { .. })));
    }

    #[test]
    fn generator_prompts_differ_by_block() {
        let (_, c) = universe();
        let t = &c.tools()[1];
        let summary = ToolTraceSummary {
            tool: t.tool_ref(),
            success_examples: vec![],
            failure_examples: vec![],
            counts: Default::default(),
        };
        let with = generator_prompt(t, Some(&summary));
        let without = generator_prompt(t, None);
        assert_eq!(with.replacen(&prompts::trace_block(&summary), "", 1), without);
        let g = Gateway::simulated();
        let d = generate_description(t, None, &g).unwrap();
        assert_eq!(d.level, DescriptionLevel::Generated);
        assert!(!parse_constraints(&d.text).is_empty());
    }

    fn repaired_matches_truth(u: &Universe, s: &RepairSession) -> bool {
        s.repaired.iter().all(|t| {
            let b = u.behavior(&t.tool_ref()).unwrap();
            let req: BTreeSet<String> = b.true_required.iter().cloned().collect();
            t.schema.required_names() == req
                && t.schema.parameters.iter().all(|p| b.true_types.get(&p.name) == Some(&p.param_type))
        })
    }

    #[test]
    fn repair_closes_each_corruption_kind() {
        let u = build_synthetic_universe(&UniverseConfig::new(3, 3, 2, 9));
        let sb = u.sandbox().unwrap();
        let g = Gateway::simulated();
        for kind in ["drop_required", "add_phantom", "flip_type"] {
            let spec = CorruptionSpec::sample(&u.collection, &u.collection.providers(), kind, 4);
            let (corrupted, diffs) = corrupt_declared_schema(&u.collection, &spec).unwrap();
            assert!(!diffs.is_empty());
            for p in corrupted.providers() {
                let s = repair_schema(&p, &corrupted, &sb, &g, DEFAULT_REPAIR_BUDGET, &[], 0).unwrap();
                assert!(s.validated, "{kind} {p}: {:?}", s.validation);
                assert!(s.transcript.len() <= DEFAULT_REPAIR_BUDGET);
                assert!(repaired_matches_truth(&u, &s), "{kind} {p}");
                let names: Vec<String> = s.repaired.iter().map(|t| t.api_name.clone()).collect();
                let before: Vec<String> = corrupted.provider_tools(&p).iter().map(|t| t.api_name.clone()).collect();
                assert_eq!(names, before);
            }
        }
    }

    #[test]
    fn scripted_remove_parameters() {
        let u = build_synthetic_universe(&UniverseConfig::new(1, 3, 1, 1));
        let sb = u.sandbox().unwrap();
        let p = u.collection.providers()[0].clone();
        let api = u.collection.provider_tools(&p)[0].api_name.clone();
        let book = ScriptBook::from_entries(vec![
            ScriptEntry::new(
                ScriptMatcher::stage(stage::REPAIR_SCHEMA).at_turn(0),
                Action::new(REMOVE_API_PARAMETERS, json!({"api_name": api})).render(),
            ),
            ScriptEntry::new(
                ScriptMatcher::stage(stage::REPAIR_SCHEMA).at_turn(1),
                Action::new(FINAL_ANSWER, json!({"answer": "done"})).render(),
            ),
        ]);
        let s = repair_schema(&p, &u.collection, &sb, &Gateway::mock(book), 5, &[], 0).unwrap();
        assert_eq!(s.transcript[0].observation, format!("Parameters field removed from API '{api}'."));
        assert!(s.repaired[0].schema.is_empty());
        // the search API really needs `query`, so validation catches the bad edit
        assert!(!s.validated);
        let s = repair_schema(&p, &u.collection, &sb, &Gateway::simulated(), 1, &[], 0).unwrap();
        assert!(!s.finished && !s.validated);
    }

    #[test]
    fn parameter_parsing_accepts_both_shapes() {
        let a = parse_parameters(&json!("{\"q\": {\"type\": \"string\", \"required\": true}}")).unwrap();
        assert_eq!(a[0].name, "q");
        assert!(a[0].required);
        let b = parse_parameters(&json!([{"name": "n", "type": "integer", "required": false}])).unwrap();
        assert_eq!(b[0].param_type, ParamType::Int);
        assert!(parse_parameters(&json!("nope")).is_err());
    }
}

//! Deterministic stand-in for a chat model.
//!
//! It sees only what a real model would see (the rendered prompts and the
//! conversation so far) and dispatches on the request's stage tag. Agentic
//! loops are handled by replaying the observations in the conversation
//! through a small state machine, so the responder itself is stateless.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use regex::Regex;
use serde_json::{json, Value};

use super::{extract_json_payload, stage, ChatRequest, Role};
use crate::agent::{is_processing_subtask, parse_constraints, split_subtasks, RuleAgent, ToolView, RESULT_MARKER};
use crate::prompts::{self, between, line_after};
use crate::react::{observation_text, Action, FINAL_ANSWER};
use crate::types::{JsonObject, ParamSpec, ParamType, ParameterSchema, ToolRef};

const MAX_PROBES: usize = 6;
const MAX_REPAIR_PROBES: usize = 8;


/// Error observation, as produced by the sandbox.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ObservedError {
    Missing(String),
    Unexpected(String),
    Type { param: String, expected: String },
    Server(u16),
    Other(String),
}

fn re(cell: &'static OnceLock<Regex>, pat: &str) -> &'static Regex {
    cell.get_or_init(|| Regex::new(pat).expect("static regex"))
}

impl ObservedError {
    /// `None` means the observation is not an error.
    pub fn parse(obs: &str) -> Option<Self> {
        static MISSING: OnceLock<Regex> = OnceLock::new();
        static UNEXPECTED: OnceLock<Regex> = OnceLock::new();
        static TYPE: OnceLock<Regex> = OnceLock::new();
        static STATUS: OnceLock<Regex> = OnceLock::new();
        let obs = obs.trim();
        if !obs.starts_with("Error") {
            return None;
        }
        if let Some(c) = re(&MISSING, r"Missing required parameter '([^']+)'").captures(obs) {
            return Some(Self::Missing(c[1].to_string()));
        }
        if let Some(c) = re(&UNEXPECTED, r"Unexpected parameter '([^']+)'").captures(obs) {
            return Some(Self::Unexpected(c[1].to_string()));
        }
        if let Some(c) = re(&TYPE, r"Type error for parameter '([^']+)': expected (.+)$").captures(obs) {
            return Some(Self::Type {
                param: c[1].to_string(),
                expected: c[2].trim().to_string(),
            });
        }
        if let Some(c) = re(&STATUS, r"Error: (\d{3})\b").captures(obs) {
            return Some(Self::Server(c[1].parse().unwrap_or(500)));
        }
        Some(Self::Other(obs.to_string()))
    }
}

/// Example value quoted in a description (`e.g. 'midnight jazz'`).
pub fn example_value(description: &str) -> Option<String> {
    static EG: OnceLock<Regex> = OnceLock::new();
    re(&EG, r"e\.g\.,?\s*'([^']+)'")
        .captures(description)
        .map(|c| c[1].to_string())
}

/// Plausible probe value for a parameter.
pub fn value_for(ty: ParamType, description: &str) -> Value {
    match ty {
        ParamType::String => json!(example_value(description).unwrap_or_else(|| "sample".into())),
        ParamType::Int => json!(1),
        ParamType::Float => json!(1.0),
        ParamType::Bool => json!(true),
        ParamType::Array => json!([]),
        ParamType::Object => json!({}),
    }
}

/// Value satisfying an "expected <X>" error message.
pub fn value_for_expected(expected: &str) -> Value {
    let e = expected.to_ascii_lowercase();
    if e.contains("ipv4") {
        json!("10.0.0.1")
    } else if e.contains("yyyy-mm-dd") {
        json!("2024-01-01")
    } else if e.contains("uppercase") {
        json!("SAMPLE")
    } else {
        value_for(type_from_expected(expected), "")
    }
}

pub fn type_from_expected(expected: &str) -> ParamType {
    let e = expected.to_ascii_lowercase();
    ["integer", "number", "boolean", "array", "object"]
        .iter()
        .find(|k| e.contains(*k))
        .and_then(|k| ParamType::parse_loose(k))
        .unwrap_or(ParamType::String)
}

fn first_user(req: &ChatRequest) -> &str {
    req.messages
        .iter()
        .find(|m| m.role == Role::User)
        .map(|m| m.content.as_str())
        .unwrap_or("")
}

/// Observations in order, one per assistant turn.
fn observations(req: &ChatRequest) -> Vec<&str> {
    let mut out = Vec::new();
    let mut seen_assistant = false;
    for m in &req.messages {
        match m.role {
            Role::Assistant => seen_assistant = true,
            Role::User if seen_assistant => {
                out.push(observation_text(&m.content));
                seen_assistant = false;
            }
            _ => {}
        }
    }
    out
}

#[derive(Debug, Clone)]
struct ApiSchema {
    name: String,
    params: Vec<ParamSpec>,
}

fn parse_schema(text: &str) -> Vec<ApiSchema> {
    let Some(i) = text.find(prompts::SCHEMA_ANCHOR) else {
        return Vec::new();
    };
    let Ok(v) = extract_json_payload(&text[i + prompts::SCHEMA_ANCHOR.len()..]) else {
        return Vec::new();
    };
    v.get("apis")
        .and_then(Value::as_array)
        .map(|apis| {
            apis.iter()
                .filter_map(|a| {
                    Some(ApiSchema {
                        name: a.get("name")?.as_str()?.to_string(),
                        params: a
                            .get("parameters")
                            .and_then(Value::as_array)
                            .map(|ps| ps.iter().filter_map(|p| serde_json::from_value(p.clone()).ok()).collect())
                            .unwrap_or_default(),
                    })
                })
                .collect()
        })
        .unwrap_or_default()
}

fn first_sentence(text: &str) -> &str {
    let line = text.lines().next().unwrap_or("").trim();
    match line.find(". ") {
        Some(i) => &line[..i],
        None => line.trim_end_matches('.'),
    }
}

fn lower_first(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_lowercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

fn upper_first(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SimulatedLlm;

impl SimulatedLlm {
    pub fn new() -> Self {
        Self
    }

    pub fn respond(&self, req: &ChatRequest) -> String {
        let user = first_user(req);
        match req.stage() {
            stage::ANNOTATE => annotate(req).render(),
            stage::REPAIR_SCHEMA => repair(req).render(),
            stage::SYNTH_PLAN => synth_plan(user).to_string(),
            stage::SYNTH_QUERY => synth_query(user).to_string(),
            stage::DECOMPOSE => decompose(user).to_string(),
            stage::ANNOTATE_SUBTASK => annotate_subtask(user).to_string(),
            stage::SELECT_TOOL => select(user).to_string(),
            stage::GENERATE_PARAMS => params(user).to_string(),
            stage::PROCESS_RESPONSE => process(user),
            stage::REFINE_D1 => refine_d1(user).to_string(),
            stage::EXTRACT_RULES => extract_rules(user).to_string(),
            stage::REFINE_D2 => refine_d2(user).to_string(),
            stage::GENERATE_DESCRIPTION => generate(user).to_string(),
            _ => "{}".to_string(),
        }
    }
}

// ---- annotation loop ----

enum AnnPhase {
    Probe,
    Health {
        health: &'static str,
        reason: String,
        example: Option<JsonObject>,
    },
    Example(JsonObject),
}

struct AnnState {
    apis: Vec<ApiSchema>,
    idx: usize,
    args: JsonObject,
    attempts: usize,
    failures: usize,
    phase: AnnPhase,
}

impl AnnState {
    fn initial_args(api: Option<&ApiSchema>) -> JsonObject {
        api.map(|a| {
            a.params
                .iter()
                .filter(|p| p.required)
                .map(|p| (p.name.clone(), value_for(p.param_type, &p.description)))
                .collect()
        })
        .unwrap_or_default()
    }

    fn new(apis: Vec<ApiSchema>) -> Self {
        let args = Self::initial_args(apis.first());
        Self {
            apis,
            idx: 0,
            args,
            attempts: 0,
            failures: 0,
            phase: AnnPhase::Probe,
        }
    }

    fn advance(&mut self) {
        self.idx += 1;
        self.args = Self::initial_args(self.apis.get(self.idx));
        self.attempts = 0;
        self.failures = 0;
        self.phase = AnnPhase::Probe;
    }

    fn spec(&self, name: &str) -> Option<&ParamSpec> {
        self.apis.get(self.idx)?.params.iter().find(|p| p.name == name)
    }

    fn observe(&mut self, obs: &str) {
        match std::mem::replace(&mut self.phase, AnnPhase::Probe) {
            AnnPhase::Probe => {
                self.attempts += 1;
                match ObservedError::parse(obs) {
                    None => {
                        self.phase = AnnPhase::Health {
                            health: "good",
                            reason: "call returned plausible data".into(),
                            example: Some(self.args.clone()),
                        };
                        return;
                    }
                    Some(ObservedError::Missing(p)) => {
                        let v = self
                            .spec(&p)
                            .map(|s| value_for(s.param_type, &s.description))
                            .unwrap_or_else(|| json!("sample"));
                        self.args.insert(p, v);
                    }
                    Some(ObservedError::Unexpected(p)) => {
                        self.args.remove(&p);
                    }
                    Some(ObservedError::Type { param, expected }) => {
                        self.args.insert(param, value_for_expected(&expected));
                    }
                    Some(ObservedError::Server(code)) => {
                        self.failures += 1;
                        if self.failures >= 2 {
                            self.phase = AnnPhase::Health {
                                health: "bad",
                                reason: format!("repeated {code} responses with corrected parameters"),
                                example: None,
                            };
                            return;
                        }
                    }
                    Some(ObservedError::Other(_)) => {}
                }
                if self.attempts >= MAX_PROBES {
                    self.phase = AnnPhase::Health {
                        health: "unknown",
                        reason: format!("no successful call after {MAX_PROBES} attempts"),
                        example: None,
                    };
                }
            }
            AnnPhase::Health {
                example: Some(args), ..
            } => self.phase = AnnPhase::Example(args),
            AnnPhase::Health { .. } | AnnPhase::Example(_) => self.advance(),
        }
    }

    fn next(&self) -> Action {
        let Some(api) = self.apis.get(self.idx) else {
            return Action::new(
                FINAL_ANSWER,
                json!({"answer": format!("Annotated {} APIs.", self.apis.len())}),
            );
        };
        match &self.phase {
            AnnPhase::Probe => Action::new(&api.name, Value::Object(self.args.clone())),
            AnnPhase::Health { health, reason, .. } => Action::new(
                "utility_annotate_health",
                json!({"api_name": api.name, "health": health, "reason": reason}),
            ),
            AnnPhase::Example(args) => Action::new(
                "utility_annotate_example",
                json!({"api_name": api.name, "example": Value::Array(vec![Value::Object(args.clone())]).to_string()}),
            ),
        }
    }
}

fn annotate(req: &ChatRequest) -> Action {
    let mut st = AnnState::new(parse_schema(first_user(req)));
    for obs in observations(req) {
        st.observe(obs);
    }
    st.next()
}

// ---- schema repair loop ----

enum RepPhase {
    Probe,
    Edit(Action),
}

struct RepState {
    apis: Vec<ApiSchema>,
    idx: usize,
    args: JsonObject,
    attempts: usize,
    phase: RepPhase,
}

fn parameters_json(params: &[ParamSpec]) -> String {
    let mut m = JsonObject::new();
    for p in params {
        m.insert(
            p.name.clone(),
            json!({"type": p.param_type.to_string(), "required": p.required, "description": p.description}),
        );
    }
    Value::Object(m).to_string()
}

impl RepState {
    fn probe_args(api: Option<&ApiSchema>) -> JsonObject {
        api.map(|a| {
            a.params
                .iter()
                .map(|p| (p.name.clone(), value_for(p.param_type, &p.description)))
                .collect()
        })
        .unwrap_or_default()
    }

    fn new(apis: Vec<ApiSchema>) -> Self {
        let args = Self::probe_args(apis.first());
        Self {
            apis,
            idx: 0,
            args,
            attempts: 0,
            phase: RepPhase::Probe,
        }
    }

    fn advance(&mut self) {
        self.idx += 1;
        self.args = Self::probe_args(self.apis.get(self.idx));
        self.attempts = 0;
        self.phase = RepPhase::Probe;
    }

    fn update_action(&self) -> Action {
        let api = &self.apis[self.idx];
        if api.params.is_empty() {
            Action::new("utility_remove_api_parameters", json!({"api_name": api.name}))
        } else {
            Action::new(
                "utility_update_api_parameters",
                json!({"api_name": api.name, "parameters_json": parameters_json(&api.params)}),
            )
        }
    }

    fn observe(&mut self, obs: &str) {
        if let RepPhase::Edit(_) = self.phase {
            self.phase = RepPhase::Probe;
            return;
        }
        self.attempts += 1;
        let idx = self.idx;
        match ObservedError::parse(obs) {
            None | Some(ObservedError::Server(_)) => return self.advance(),
            Some(ObservedError::Missing(p)) => {
                let v = json!("sample");
                self.apis[idx].params.push(ParamSpec::required(p.clone(), ParamType::String, ""));
                self.args.insert(p, v);
                self.phase = RepPhase::Edit(self.update_action());
            }
            Some(ObservedError::Unexpected(p)) => {
                self.apis[idx].params.retain(|s| s.name != p);
                self.args.remove(&p);
                self.phase = RepPhase::Edit(self.update_action());
            }
            Some(ObservedError::Type { param, expected }) => {
                let ty = type_from_expected(&expected);
                if let Some(s) = self.apis[idx].params.iter_mut().find(|s| s.name == param) {
                    s.param_type = ty;
                    if ty == ParamType::String && !expected.eq_ignore_ascii_case("string") {
                        s.description = format!("Must be a valid {expected}.");
                    }
                }
                self.args.insert(param, value_for_expected(&expected));
                self.phase = RepPhase::Edit(self.update_action());
            }
            Some(ObservedError::Other(_)) => {}
        }
        if self.attempts >= MAX_REPAIR_PROBES {
            self.advance();
        }
    }

    fn next(&self) -> Action {
        let Some(api) = self.apis.get(self.idx) else {
            return Action::new(
                FINAL_ANSWER,
                json!({"answer": format!("Checked {} APIs against live calls.", self.apis.len())}),
            );
        };
        match &self.phase {
            RepPhase::Probe => Action::new(&api.name, Value::Object(self.args.clone())),
            RepPhase::Edit(a) => a.clone(),
        }
    }
}

fn repair(req: &ChatRequest) -> Action {
    let mut st = RepState::new(parse_schema(first_user(req)));
    for obs in observations(req) {
        st.observe(obs);
    }
    st.next()
}

// ---- synthesis ----

struct ProviderApi {
    name: String,
    description: String,
    required: Vec<String>,
    responses: Vec<String>,
    example_strings: Vec<String>,
}

fn parse_provider(text: &str) -> Vec<ProviderApi> {
    let Some(raw) = line_after(text, "PROVIDER: ") else {
        return Vec::new();
    };
    let Ok(v) = extract_json_payload(raw) else {
        return Vec::new();
    };
    let apis = v.get("apis").and_then(Value::as_array).cloned().unwrap_or_default();
    apis.iter()
        .filter_map(|a| {
            let params: Vec<ParamSpec> = a
                .get("parameters")
                .and_then(Value::as_array)
                .map(|ps| ps.iter().filter_map(|p| serde_json::from_value(p.clone()).ok()).collect())
                .unwrap_or_default();
            let examples = a.get("examples").and_then(Value::as_array).cloned().unwrap_or_default();
            let mut example_strings: Vec<String> = examples
                .iter()
                .filter_map(|e| e.get("arguments").and_then(Value::as_object))
                .flat_map(|m| m.values().filter_map(Value::as_str).map(str::to_string).collect::<Vec<_>>())
                .collect();
            example_strings.extend(params.iter().filter_map(|p| example_value(&p.description)));
            Some(ProviderApi {
                name: a.get("name")?.as_str()?.to_string(),
                description: a.get("description").and_then(Value::as_str).unwrap_or("").to_string(),
                required: params.iter().filter(|p| p.required).map(|p| p.name.clone()).collect(),
                responses: examples
                    .iter()
                    .filter_map(|e| e.get("response_digest").and_then(Value::as_str).map(str::to_string))
                    .collect(),
                example_strings,
            })
        })
        .collect()
}

/// Edges `a -> b` where one of `b`'s required parameters appears in `a`'s
/// recorded responses.
fn dependency_edges(apis: &[ProviderApi]) -> Vec<(usize, usize, String)> {
    let mut edges = Vec::new();
    for (j, b) in apis.iter().enumerate() {
        for r in &b.required {
            let needle = format!("\"{r}\"");
            for (i, a) in apis.iter().enumerate() {
                if i != j && a.responses.iter().any(|d| d.contains(&needle)) {
                    edges.push((i, j, r.clone()));
                }
            }
        }
    }
    edges
}

fn longest_chain(n: usize, edges: &[(usize, usize, String)]) -> Vec<usize> {
    fn walk(v: usize, edges: &[(usize, usize, String)], seen: &mut Vec<usize>, best: &mut Vec<usize>) {
        seen.push(v);
        if seen.len() > best.len() {
            *best = seen.clone();
        }
        for (a, b, _) in edges {
            if *a == v && !seen.contains(b) {
                walk(*b, edges, seen, best);
            }
        }
        seen.pop();
    }
    let mut best = Vec::new();
    for start in 0..n {
        walk(start, edges, &mut Vec::new(), &mut best);
    }
    best
}

fn synth_plan(user: &str) -> Value {
    static SIZE: OnceLock<Regex> = OnceLock::new();
    let size = re(&SIZE, r"select (\d+) APIs")
        .captures(user)
        .and_then(|c| c[1].parse::<usize>().ok())
        .unwrap_or(3);
    let apis = parse_provider(user);
    let edges = dependency_edges(&apis);
    let chain = longest_chain(apis.len(), &edges);
    let selected: Vec<&str> = chain.iter().take(size).map(|&i| apis[i].name.as_str()).collect();
    let analysis: Vec<String> = chain
        .windows(2)
        .take(size.saturating_sub(1))
        .filter_map(|w| {
            edges
                .iter()
                .find(|(a, b, _)| *a == w[0] && *b == w[1])
                .map(|(a, b, f)| format!("{} returns {f}, which {} requires", apis[*a].name, apis[*b].name))
        })
        .collect();
    json!({"analysis": analysis.join("; "), "selected_apis": selected})
}

fn synth_query(user: &str) -> Value {
    let apis = parse_provider(user);
    let plan = line_after(user, "PLAN: ")
        .and_then(|p| extract_json_payload(p).ok())
        .unwrap_or(Value::Null);
    let names: Vec<String> = plan
        .get("selected_apis")
        .unwrap_or(&plan)
        .as_array()
        .map(|a| a.iter().filter_map(Value::as_str).map(str::to_string).collect())
        .unwrap_or_default();
    let mut clauses = Vec::new();
    for (j, n) in names.iter().enumerate() {
        let Some(api) = apis.iter().find(|a| &a.name == n) else { continue };
        let mut c = lower_first(first_sentence(&api.description));
        if j == 0 {
            let kw = api.example_strings.first().cloned().unwrap_or_else(|| "something popular".into());
            c = c.replace("a keyword", &format!("'{kw}'"));
        } else {
            c = c.replace(" one ", " that ");
        }
        clauses.push(c);
        if j == 0 && names.len() > 1 {
            clauses.push("pick the top match from the results".into());
        }
    }
    let mut q = upper_first(&clauses.join(", then "));
    q.push('.');
    json!({"query": q})
}

fn decompose(user: &str) -> Value {
    json!({"subtasks": split_subtasks(line_after(user, "QUERY: ").unwrap_or(""))})
}

fn views_from_info(info: &Value) -> Vec<ToolView> {
    info.as_array()
        .map(|a| {
            a.iter()
                .filter_map(|t| {
                    let api = t.get("api_name").or_else(|| t.get("name"))?.as_str()?;
                    let provider = t.get("provider").and_then(Value::as_str).unwrap_or("");
                    Some(ToolView {
                        tool: ToolRef::new(provider, api),
                        description: t.get("description").and_then(Value::as_str).unwrap_or("").to_string(),
                        schema: ParameterSchema::default(),
                    })
                })
                .collect()
        })
        .unwrap_or_default()
}

fn annotate_subtask(user: &str) -> Value {
    let subtask = line_after(user, "- Subtask Input: ").unwrap_or("");
    if is_processing_subtask(subtask) {
        return json!({
            "needs_api": false,
            "reasoning": "The subtask only works on data gathered by previous steps.",
            "confidence": 0.9,
            "api_name": "",
        });
    }
    let info = line_after(user, "- Available APIs: ")
        .and_then(|s| extract_json_payload(s).ok())
        .unwrap_or(Value::Null);
    let views = views_from_info(&info);
    match RuleAgent::choose(subtask, &views) {
        Some(v) => json!({
            "needs_api": true,
            "reasoning": format!("The subtask must retrieve new data; {} covers it.", v.tool.api_name),
            "confidence": if RuleAgent::score(subtask, v) > 0 { 0.9 } else { 0.4 },
            "api_name": v.tool.api_name,
            "provider": v.tool.provider_id,
        }),
        None => json!({"needs_api": false, "reasoning": "No API is available.", "confidence": 0.2, "api_name": ""}),
    }
}

fn select(user: &str) -> Value {
    let info = between(user, "Available Tools and APIs:\n", "\n\nYour task:")
        .and_then(|s| extract_json_payload(s).ok())
        .unwrap_or(Value::Null);
    let subtask = between(user, "### Subtask Query\n", "\n\nImportant").unwrap_or("");
    let views = views_from_info(&info);
    match RuleAgent::choose(subtask, &views) {
        Some(v) => json!({"selected_api": {
            "reasoning": "Highest overlap between the subtask and the API description.",
            "api_name": v.tool.api_name,
            "provider": v.tool.provider_id,
        }}),
        None => json!({"selected_api": {"reasoning": "no tools", "api_name": "", "provider": ""}}),
    }
}

fn params(user: &str) -> Value {
    let log = between(user, "There are logs of previous questions and answers:\n", "\n\nThis is API tool documentation:")
        .unwrap_or("");
    let doc = between(user, "This is API tool documentation:\n", "\n\nThis is the current subtask:")
        .and_then(|s| extract_json_payload(s).ok())
        .unwrap_or(Value::Null);
    let subtask = between(user, "This is the current subtask:\n", "\n\nOutput:").unwrap_or("");
    let specs = |key: &str| -> Vec<ParamSpec> {
        doc.get(key)
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(|p| serde_json::from_value(p.clone()).ok()).collect())
            .unwrap_or_default()
    };
    let mut parameters = specs("required_parameters");
    parameters.extend(specs("optional_parameters"));
    let view = ToolView {
        tool: ToolRef::new(
            doc.get("provider").and_then(Value::as_str).unwrap_or(""),
            doc.get("api_name").and_then(Value::as_str).unwrap_or(""),
        ),
        description: doc.get("description").and_then(Value::as_str).unwrap_or("").to_string(),
        schema: ParameterSchema::new(parameters),
    };
    let context: Vec<String> = log.lines().map(str::to_string).collect();
    let p = RuleAgent::fill(subtask, &context, &view);
    json!({
        "Reasoning": format!("Filled {} parameter(s) from the subtask and the documented constraints.", p.len()),
        "Parameters": p,
    })
}

fn process(user: &str) -> String {
    let question = line_after(user, "This is the user's question: ").unwrap_or("");
    let result = user
        .find("This is the response output by the API tool:\n")
        .map(|i| &user[i + "This is the response output by the API tool:\n".len()..])
        .unwrap_or("")
        .trim();
    if result.starts_with('(') || result.is_empty() {
        format!("{RESULT_MARKER}(processed) {question}")
    } else {
        format!("{RESULT_MARKER}{}", result.replace('\n', " "))
    }
}

// ---- descriptions ----

fn schema_from_line(user: &str) -> Vec<ParamSpec> {
    line_after(user, "- Parameter schema: ")
        .and_then(|s| serde_json::from_str(s.trim()).ok())
        .unwrap_or_default()
}

fn d1_text(api_name: &str, params: &[ParamSpec], original: &str) -> String {
    let summary = if original.trim().is_empty() {
        format!("Calls the {} endpoint.", api_name.replace('_', " "))
    } else {
        let s = first_sentence(original);
        format!("{s}.")
    };
    let fmt = |p: &ParamSpec| {
        let d = p.description.trim().trim_end_matches('.');
        if d.is_empty() {
            format!("{} ({})", p.name, p.param_type)
        } else {
            format!("{} ({}): {d}", p.name, p.param_type)
        }
    };
    let req: Vec<String> = params.iter().filter(|p| p.required).map(fmt).collect();
    let opt: Vec<String> = params.iter().filter(|p| !p.required).map(fmt).collect();
    let mut out = summary;
    out.push_str(&format!(
        " Required parameters: {}.",
        if req.is_empty() { "none".into() } else { req.join("; ") }
    ));
    if !opt.is_empty() {
        out.push_str(&format!(" Optional parameters: {}.", opt.join("; ")));
    }
    out.push_str(" Returns a JSON object on success. Calls with missing, unexpected or mistyped parameters are rejected with a validation error.");
    out
}

fn refine_d1(user: &str) -> Value {
    let name = line_after(user, "- API name: ").unwrap_or("").trim();
    let original = between(user, "- Baseline description: ", "\n\nKeep the first sentence").unwrap_or("");
    json!({"description": d1_text(name, &schema_from_line(user), original)})
}

fn rule_for_error(err: &ObservedError, earlier_responses: &[String]) -> Option<String> {
    let from_previous = |p: &str| {
        let needle = format!("\"{p}\"");
        earlier_responses.iter().any(|r| r.contains(&needle))
    };
    match err {
        ObservedError::Type { param, expected } if expected.to_ascii_lowercase().contains("ipv4") => {
            Some(format!("PARAM {param} MUST be IPv4"))
        }
        ObservedError::Type { param, .. } | ObservedError::Missing(param) if from_previous(param) => {
            Some(format!("PARAM {param} MUST come from previous response"))
        }
        ObservedError::Type { param, expected } => Some(format!("PARAM {param} MUST be {expected}")),
        ObservedError::Missing(param) => Some(format!("PARAM {param} MUST be provided")),
        ObservedError::Unexpected(param) => Some(format!("PARAM {param} MUST be omitted")),
        _ => None,
    }
}

fn extract_rules(user: &str) -> Value {
    let ev = line_after(user, "EVIDENCE: ")
        .and_then(|s| extract_json_payload(s).ok())
        .unwrap_or(Value::Null);
    let failed = ev.get("failed_step").cloned().unwrap_or(Value::Null);
    let api = failed.get("api_name").and_then(Value::as_str).unwrap_or("");
    let index = failed.get("index").and_then(Value::as_u64).unwrap_or(0);
    let error = failed.get("error").and_then(Value::as_str).unwrap_or("");
    let earlier: Vec<String> = ev
        .get("ground_truth")
        .and_then(Value::as_array)
        .map(|a| {
            a.iter()
                .filter(|g| g.get("step").and_then(Value::as_u64).is_some_and(|s| s < index))
                .filter_map(|g| g.get("example_response").and_then(Value::as_str).map(str::to_string))
                .collect()
        })
        .unwrap_or_default();
    let rules: Vec<Value> = ObservedError::parse(error)
        .and_then(|e| rule_for_error(&e, &earlier))
        .map(|text| vec![json!({"text": text, "applies_to": api, "kind": "param_constraint"})])
        .unwrap_or_default();
    json!({"rules": rules})
}

fn refine_d2(user: &str) -> Value {
    let d1 = between(user, "CURRENT DESCRIPTION:\n", "\nEND DESCRIPTION").unwrap_or("");
    let rules = line_after(user, "RULES: ")
        .and_then(|s| extract_json_payload(s).ok())
        .unwrap_or(Value::Null);
    let mut lines: Vec<String> = Vec::new();
    for r in rules.as_array().into_iter().flatten() {
        let t = r.as_str().or_else(|| r.get("text").and_then(Value::as_str)).unwrap_or("").trim();
        if !t.is_empty() && !lines.iter().any(|l| l == t) {
            lines.push(t.to_string());
        }
    }
    let mut out = d1.trim_end().to_string();
    for l in lines {
        out.push('\n');
        out.push_str(&l);
    }
    json!({"description": out})
}

fn generate(user: &str) -> Value {
    let name = line_after(user, "- API name: ").unwrap_or("").trim();
    let params = schema_from_line(user);
    let original = between(user, "- Baseline description: ", "\n\nInfer").unwrap_or("");
    let mut rules: Vec<String> = Vec::new();
    if let Some(block) = line_after(user, prompts::TRACE_BLOCK_PREFIX) {
        let v = extract_json_payload(block).unwrap_or(Value::Null);
        for f in v.get("failure_examples").and_then(Value::as_array).into_iter().flatten() {
            let msg = f.get("error_message").and_then(Value::as_str).unwrap_or("");
            let Some(err) = ObservedError::parse(msg) else { continue };
            let rule = match &err {
                ObservedError::Type { param, .. } | ObservedError::Missing(param)
                    if param.ends_with("_id") && params.iter().any(|p| &p.name == param) =>
                {
                    Some(format!("PARAM {param} MUST come from previous response"))
                }
                other => rule_for_error(other, &[]),
            };
            rules.extend(rule);
        }
    } else {
        for p in &params {
            if p.required && p.param_type == ParamType::Int && p.name.ends_with("_id") {
                rules.push(format!("PARAM {} MUST come from previous response", p.name));
            }
        }
    }
    let mut seen = BTreeSet::new();
    rules.retain(|r| seen.insert(r.clone()));
    let existing: BTreeSet<String> = parse_constraints(original).into_iter().map(|c| c.param).collect();
    let mut out = d1_text(name, &params, original);
    for r in rules {
        if parse_constraints(&r).first().is_some_and(|c| existing.contains(&c.param)) {
            continue;
        }
        out.push('\n');
        out.push_str(&r);
    }
    json!({"description": out})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ChatMessage, Gateway};
    use crate::react::{observation, parse_action};

    #[test]
    fn error_parsing() {
        assert_eq!(
            ObservedError::parse("Error: Missing required parameter 'date'"),
            Some(ObservedError::Missing("date".into()))
        );
        assert_eq!(
            ObservedError::parse("Error: Type error for parameter 'ip': expected IPv4 address"),
            Some(ObservedError::Type { param: "ip".into(), expected: "IPv4 address".into() })
        );
        assert_eq!(ObservedError::parse("Error: 401 Unauthorized"), Some(ObservedError::Server(401)));
        assert_eq!(ObservedError::parse("{\"ok\": 1}"), None);
    }

    #[test]
    fn expected_values() {
        assert_eq!(value_for_expected("integer"), json!(1));
        assert_eq!(value_for_expected("IPv4 address"), json!("10.0.0.1"));
        assert_eq!(type_from_expected("number"), ParamType::Float);
        assert_eq!(value_for(ParamType::String, "Search keyword, e.g. 'midnight jazz'"), json!("midnight jazz"));
    }

    fn loop_request(stage_tag: &str, user: String, turns: &[(&str, &str)]) -> ChatRequest {
        let mut msgs = vec![ChatMessage::system("sys"), ChatMessage::user(user)];
        for (a, o) in turns {
            msgs.push(ChatMessage::assistant(*a));
            msgs.push(ChatMessage::user(observation(o)));
        }
        ChatRequest::new(stage_tag, "sim", msgs)
    }

    #[test]
    fn annotation_probe_adapt() {
        let schema = json!({"provider": "p", "apis": [{"name": "lookup", "description": "", "parameters": [
            {"name": "q", "type": "string", "required": true, "description": "e.g. 'jazz'"}
        ]}]});
        let user = format!("{}{}", prompts::ANNOTATOR_USER, schema);
        let sim = SimulatedLlm::new();
        let a0 = parse_action(&sim.respond(&loop_request(stage::ANNOTATE, user.clone(), &[]))).unwrap();
        assert_eq!(a0.name, "lookup");
        assert_eq!(a0.arguments, json!({"q": "jazz"}));
        let a1 = parse_action(&sim.respond(&loop_request(
            stage::ANNOTATE,
            user.clone(),
            &[("x", "Error: Missing required parameter 'date'")],
        )))
        .unwrap();
        assert_eq!(a1.arguments, json!({"q": "jazz", "date": "sample"}));
        let a2 = parse_action(&sim.respond(&loop_request(stage::ANNOTATE, user.clone(), &[("x", "{\"r\": 1}")]))).unwrap();
        assert_eq!(a2.name, "utility_annotate_health");
        assert_eq!(a2.arguments["health"], "good");
        let turns = [("x", "Error: 401 Unauthorized"), ("x", "Error: 401 Unauthorized")];
        let a3 = parse_action(&sim.respond(&loop_request(stage::ANNOTATE, user, &turns))).unwrap();
        assert_eq!(a3.arguments["health"], "bad");
    }

    #[test]
    fn decomposition_and_selection() {
        let g = Gateway::simulated();
        let r = g.request(stage::DECOMPOSE, prompts::DECOMPOSE_SYSTEM, prompts::decompose_user(
            "Find tracks matching 'jazz', then pick the top match from the results, then pull up the full record for that track.",
        ));
        let v = g.complete_json(&r).unwrap();
        assert_eq!(v["subtasks"].as_array().unwrap().len(), 3);
        assert_eq!(v["subtasks"][1], "Pick the top match from the results");
        let info = json!([
            {"api_name": "search_tracks", "provider": "p", "description": "Find tracks matching a keyword."},
            {"api_name": "get_track_details", "provider": "p", "description": "Pull up the full record for one track."}
        ]);
        let r = g.request(stage::SELECT_TOOL, prompts::SELECT_SYSTEM, prompts::select_user(&info, "(none)", "Pull up the full record for that track"));
        assert_eq!(g.complete_json(&r).unwrap()["selected_api"]["api_name"], "get_track_details");
        let r = g.request(
            stage::ANNOTATE_SUBTASK,
            prompts::SUBTASK_ANNOTATION_SYSTEM,
            prompts::subtask_annotation_user("q", "Count how many are comedies from the results", "", &info),
        );
        assert_eq!(g.complete_json(&r).unwrap()["needs_api"], false);
    }

    #[test]
    fn rules_follow_errors() {
        let ev = json!({
            "failed_step": {"index": 2, "api_name": "get_track_details", "error": "Error: Type error for parameter 'track_id': expected integer"},
            "ground_truth": [{"step": 0, "api_name": "search_tracks", "example_response": "{\"results\":[{\"track_id\":5}]}"}]
        });
        let v = extract_rules(&prompts::extract_rules_user(&ev));
        assert_eq!(v["rules"][0]["text"], "PARAM track_id MUST come from previous response");
        let ev = json!({"failed_step": {"index": 0, "api_name": "lookup", "error": "Error: Type error for parameter 'ip': expected IPv4 address"}, "ground_truth": []});
        assert_eq!(extract_rules(&prompts::extract_rules_user(&ev))["rules"][0]["text"], "PARAM ip MUST be IPv4");
    }

    #[test]
    fn d2_appends_rule_lines() {
        let v = refine_d2(&prompts::refine_d2_user("a", "Line one.", &json!(["PARAM x MUST be IPv4", "PARAM x MUST be IPv4"])));
        assert_eq!(v["description"], "Line one.\nPARAM x MUST be IPv4");
    }
}

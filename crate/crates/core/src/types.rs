//! Domain types shared by every pipeline stage.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// JSON object used for call arguments and opaque extras.
pub type JsonObject = Map<String, Value>;

/// Identifies one API endpoint: `(provider_id, api_name)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ToolRef {
    pub provider_id: String,
    pub api_name: String,
}

impl ToolRef {
    pub fn new(provider_id: impl Into<String>, api_name: impl Into<String>) -> Self {
        Self {
            provider_id: provider_id.into(),
            api_name: api_name.into(),
        }
    }
}

impl fmt::Display for ToolRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}::{}", self.provider_id, self.api_name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamType {
    String,
    Int,
    Float,
    Bool,
    Array,
    Object,
}

impl ParamType {
    pub fn matches(self, value: &Value) -> bool {
        match self {
            ParamType::String => value.is_string(),
            ParamType::Int => value.is_i64() || value.is_u64(),
            ParamType::Float => value.is_number(),
            ParamType::Bool => value.is_boolean(),
            ParamType::Array => value.is_array(),
            ParamType::Object => value.is_object(),
        }
    }

    /// Human name used in error observations ("expected integer").
    pub fn noun(self) -> &'static str {
        match self {
            ParamType::String => "string",
            ParamType::Int => "integer",
            ParamType::Float => "number",
            ParamType::Bool => "boolean",
            ParamType::Array => "array",
            ParamType::Object => "object",
        }
    }

    /// Parses both schema spellings (`int`, `integer`, `number`, ...).
    pub fn parse_loose(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "string" | "str" | "text" => Some(ParamType::String),
            "int" | "integer" => Some(ParamType::Int),
            "float" | "number" | "double" => Some(ParamType::Float),
            "bool" | "boolean" => Some(ParamType::Bool),
            "array" | "list" => Some(ParamType::Array),
            "object" | "dict" | "map" => Some(ParamType::Object),
            _ => None,
        }
    }
}

impl fmt::Display for ParamType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParamType::String => "string",
            ParamType::Int => "int",
            ParamType::Float => "float",
            ParamType::Bool => "bool",
            ParamType::Array => "array",
            ParamType::Object => "object",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub param_type: ParamType,
    pub required: bool,
    #[serde(default)]
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enum_values: Option<Vec<Value>>,
}

impl ParamSpec {
    pub fn required(name: impl Into<String>, param_type: ParamType, description: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            param_type,
            required: true,
            description: description.into(),
            default: None,
            enum_values: None,
        }
    }

    pub fn optional(name: impl Into<String>, param_type: ParamType, description: impl Into<String>) -> Self {
        Self {
            required: false,
            ..Self::required(name, param_type, description)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParameterSchema {
    pub parameters: Vec<ParamSpec>,
}

#[derive(Debug, Error, PartialEq)]
pub enum SchemaError {
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("required parameter `{0}` must not declare a default")]
    RequiredWithDefault(String),
    #[error("empty parameter name")]
    EmptyName,
}

impl ParameterSchema {
    pub fn new(parameters: Vec<ParamSpec>) -> Self {
        Self { parameters }
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        let mut seen = BTreeSet::new();
        for p in &self.parameters {
            if p.name.is_empty() {
                return Err(SchemaError::EmptyName);
            }
            if !seen.insert(p.name.as_str()) {
                return Err(SchemaError::DuplicateParam(p.name.clone()));
            }
            if p.required && p.default.is_some() {
                return Err(SchemaError::RequiredWithDefault(p.name.clone()));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamSpec> {
        self.parameters.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamSpec> {
        self.parameters.iter_mut().find(|p| p.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.parameters.iter().map(|p| p.name.as_str())
    }

    pub fn required_names(&self) -> BTreeSet<String> {
        self.parameters
            .iter()
            .filter(|p| p.required)
            .map(|p| p.name.clone())
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.parameters.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Health {
    Good,
    Bad,
    Unknown,
    #[default]
    Unannotated,
}

impl Health {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "good" => Some(Health::Good),
            "bad" => Some(Health::Bad),
            "unknown" => Some(Health::Unknown),
            "unannotated" => Some(Health::Unannotated),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleCall {
    pub arguments: JsonObject,
    #[serde(default)]
    pub response_digest: String,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolInterface {
    pub provider_id: String,
    pub api_name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub schema: ParameterSchema,
    #[serde(default)]
    pub category: String,
    #[serde(default)]
    pub health: Health,
    #[serde(default)]
    pub examples: Vec<ExampleCall>,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    pub extras: JsonObject,
}

impl ToolInterface {
    pub fn tool_ref(&self) -> ToolRef {
        ToolRef::new(&self.provider_id, &self.api_name)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CollectionError {
    #[error("tool has an empty api_name (provider `{0}`)")]
    EmptyApiName(String),
    #[error("duplicate tool {0}")]
    Duplicate(ToolRef),
    #[error("tool {tool}: {source}")]
    Schema { tool: ToolRef, source: SchemaError },
    #[error("example for {tool} uses undeclared argument `{arg}`")]
    ExampleArgument { tool: ToolRef, arg: String },
}

/// An ordered set of tool interfaces, unique on `(provider_id, api_name)`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ToolCollection {
    tools: Vec<ToolInterface>,
}

impl ToolCollection {
    pub fn new(tools: Vec<ToolInterface>) -> Result<Self, CollectionError> {
        let mut c = Self::default();
        for t in tools {
            c.insert(t)?;
        }
        Ok(c)
    }

    pub fn insert(&mut self, tool: ToolInterface) -> Result<(), CollectionError> {
        if tool.api_name.is_empty() {
            return Err(CollectionError::EmptyApiName(tool.provider_id));
        }
        let r = tool.tool_ref();
        if self.get(&r).is_some() {
            return Err(CollectionError::Duplicate(r));
        }
        tool.schema
            .validate()
            .map_err(|source| CollectionError::Schema { tool: r.clone(), source })?;
        self.tools.push(tool);
        Ok(())
    }

    pub fn tools(&self) -> &[ToolInterface] {
        &self.tools
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ToolInterface> {
        self.tools.iter()
    }

    pub fn get(&self, r: &ToolRef) -> Option<&ToolInterface> {
        self.tools
            .iter()
            .find(|t| t.provider_id == r.provider_id && t.api_name == r.api_name)
    }

    pub fn get_mut(&mut self, r: &ToolRef) -> Option<&mut ToolInterface> {
        self.tools
            .iter_mut()
            .find(|t| t.provider_id == r.provider_id && t.api_name == r.api_name)
    }

    /// Provider ids in first-seen order.
    pub fn providers(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.tools
            .iter()
            .filter(|t| seen.insert(t.provider_id.clone()))
            .map(|t| t.provider_id.clone())
            .collect()
    }

    pub fn provider_tools(&self, provider_id: &str) -> Vec<&ToolInterface> {
        self.tools.iter().filter(|t| t.provider_id == provider_id).collect()
    }

    pub fn refs(&self) -> Vec<ToolRef> {
        self.tools.iter().map(ToolInterface::tool_ref).collect()
    }

    /// `(provider_id, api_name)` set; used to assert that no stage renames tools.
    pub fn name_set(&self) -> BTreeSet<ToolRef> {
        self.refs().into_iter().collect()
    }

    pub fn category_of_provider(&self, provider_id: &str) -> Option<&str> {
        self.tools
            .iter()
            .find(|t| t.provider_id == provider_id)
            .map(|t| t.category.as_str())
    }

    /// Checks the example-argument invariant for every tool.
    pub fn check_examples(&self) -> Result<(), CollectionError> {
        for t in &self.tools {
            for ex in &t.examples {
                for k in ex.arguments.keys() {
                    if t.schema.get(k).is_none() {
                        return Err(CollectionError::ExampleArgument {
                            tool: t.tool_ref(),
                            arg: k.clone(),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    A,
    B,
    Test,
    #[default]
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: String,
    pub text: String,
    pub ground_truth_sequence: Vec<ToolRef>,
    pub candidate_tools: Vec<ToolRef>,
    #[serde(default)]
    pub category: String,
    #[serde(default)]
    pub split: Split,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    pub extras: JsonObject,
}

#[derive(Debug, Error, PartialEq)]
pub enum QueryError {
    #[error("query {0} has an empty ground-truth sequence")]
    EmptyGroundTruth(String),
    #[error("query {query}: ground-truth tool {tool} is not a candidate")]
    GroundTruthNotCandidate { query: String, tool: ToolRef },
}

impl Query {
    pub fn validate(&self) -> Result<(), QueryError> {
        if self.ground_truth_sequence.is_empty() {
            return Err(QueryError::EmptyGroundTruth(self.query_id.clone()));
        }
        for gt in &self.ground_truth_sequence {
            if !self.candidate_tools.contains(gt) {
                return Err(QueryError::GroundTruthNotCandidate {
                    query: self.query_id.clone(),
                    tool: gt.clone(),
                });
            }
        }
        Ok(())
    }

    /// Distinct tools referenced by this query (ground truth plus candidates).
    pub fn tools(&self) -> BTreeSet<ToolRef> {
        self.ground_truth_sequence
            .iter()
            .chain(self.candidate_tools.iter())
            .cloned()
            .collect()
    }
}

/// Outcome status of one tool invocation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "param", rename_all = "snake_case")]
pub enum ResponseStatus {
    Ok,
    MissingRequiredParam(String),
    UnexpectedParam(String),
    TypeError(String),
    Unauthorized,
    NotFound,
    ServerError,
}

impl ResponseStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, ResponseStatus::Ok)
    }

    /// Client-side validation errors, as opposed to server-side failures.
    pub fn is_client_error(&self) -> bool {
        matches!(
            self,
            ResponseStatus::MissingRequiredParam(_)
                | ResponseStatus::UnexpectedParam(_)
                | ResponseStatus::TypeError(_)
        )
    }
}

/// `o_t`: what the environment returned for one call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResponse {
    pub status: ResponseStatus,
    pub body: Value,
    #[serde(default)]
    pub from_cache: bool,
}

impl ToolResponse {
    pub fn ok(body: Value) -> Self {
        Self {
            status: ResponseStatus::Ok,
            body,
            from_cache: false,
        }
    }

    pub fn error(status: ResponseStatus, message: impl Into<String>) -> Self {
        Self {
            status,
            body: Value::String(message.into()),
            from_cache: false,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status.is_ok()
    }

    /// Text shown to agents as an observation: the JSON body on success,
    /// the error message otherwise.
    pub fn observation(&self) -> String {
        match (&self.status, &self.body) {
            (ResponseStatus::Ok, body) => serde_json::to_string(body).unwrap_or_default(),
            (_, Value::String(s)) => s.clone(),
            (_, other) => other.to_string(),
        }
    }
}

/// One subtask record `h_t = (x_t, a_t, p_t, o_t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub index: usize,
    pub input: String,
    pub selected_tool: Option<ToolRef>,
    pub parameters: JsonObject,
    pub output: ToolResponse,
    pub gt_tool: Option<ToolRef>,
    pub needs_api: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalStatus {
    Success,
    Failure,
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub query_id: String,
    pub steps: Vec<TraceStep>,
    pub terminal_status: TerminalStatus,
    #[serde(default)]
    pub ground_truth_sequence: Vec<ToolRef>,
}

impl Trace {
    pub fn indices_contiguous(&self) -> bool {
        self.steps.iter().enumerate().all(|(i, s)| s.index == i)
    }

    /// Status implied by the steps: success iff every needs-api step returned ok.
    pub fn derived_status(steps: &[TraceStep]) -> TerminalStatus {
        if steps.iter().filter(|s| s.needs_api).all(|s| s.output.is_ok()) {
            TerminalStatus::Success
        } else {
            TerminalStatus::Failure
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CallCounts {
    pub calls: usize,
    pub successes: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessExample {
    pub args: JsonObject,
    pub response_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureExample {
    pub args: JsonObject,
    pub error_message: String,
}

/// `h_i`: per-tool digest of traced calls. Counts are exact, examples truncated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolTraceSummary {
    pub tool: ToolRef,
    pub success_examples: Vec<SuccessExample>,
    pub failure_examples: Vec<FailureExample>,
    pub counts: CallCounts,
}

/// Per-subtask score `r(a_t, p_t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub selection_correct: bool,
    pub execution_success: bool,
    pub subtask_success: bool,
}

impl StepOutcome {
    pub fn new(selection_correct: bool, execution_success: bool) -> Self {
        Self {
            selection_correct,
            execution_success,
            subtask_success: selection_correct && execution_success,
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.subtask_success == (self.selection_correct && self.execution_success)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DescriptionLevel {
    D0,
    D1,
    D2,
    #[serde(rename = "generated")]
    Generated,
}

impl DescriptionLevel {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "d0" => Some(Self::D0),
            "d1" => Some(Self::D1),
            "d2" => Some(Self::D2),
            "generated" => Some(Self::Generated),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::D0 => "d0",
            Self::D1 => "d1",
            Self::D2 => "d2",
            Self::Generated => "generated",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_op: String,
    pub model_id: String,
    #[serde(default)]
    pub rule_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptionVersion {
    pub tool: ToolRef,
    pub level: DescriptionLevel,
    pub text: String,
    pub provenance: Provenance,
}

impl DescriptionVersion {
    /// The untouched original description.
    pub fn original(tool: &ToolInterface) -> Self {
        Self {
            tool: tool.tool_ref(),
            level: DescriptionLevel::D0,
            text: tool.description.clone(),
            provenance: Provenance {
                source_op: "original".into(),
                model_id: "original".into(),
                rule_ids: Vec::new(),
            },
        }
    }
}

/// Additive store of description versions keyed by `(tool, level)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DescriptionStore {
    versions: BTreeMap<(ToolRef, DescriptionLevel), DescriptionVersion>,
}

impl DescriptionStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_collection(collection: &ToolCollection) -> Self {
        let mut s = Self::new();
        for t in collection.iter() {
            s.insert(DescriptionVersion::original(t));
        }
        s
    }

    /// Inserts or replaces a version. D0 entries are never replaced once present.
    pub fn insert(&mut self, v: DescriptionVersion) {
        let key = (v.tool.clone(), v.level);
        if v.level == DescriptionLevel::D0 && self.versions.contains_key(&key) {
            return;
        }
        self.versions.insert(key, v);
    }

    pub fn get(&self, tool: &ToolRef, level: DescriptionLevel) -> Option<&DescriptionVersion> {
        self.versions.get(&(tool.clone(), level))
    }

    pub fn levels_for(&self, tool: &ToolRef) -> Vec<DescriptionLevel> {
        self.versions
            .keys()
            .filter(|(t, _)| t == tool)
            .map(|(_, l)| *l)
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &DescriptionVersion> {
        self.versions.values()
    }

    pub fn len(&self) -> usize {
        self.versions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.versions.is_empty()
    }

    pub fn has_level(&self, level: DescriptionLevel) -> bool {
        self.versions.keys().any(|(_, l)| *l == level)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn tool(p: &str, a: &str) -> ToolInterface {
        ToolInterface {
            provider_id: p.into(),
            api_name: a.into(),
            description: "d".into(),
            schema: ParameterSchema::new(vec![ParamSpec::required("q", ParamType::String, "")]),
            category: "c".into(),
            health: Health::Unannotated,
            examples: vec![],
            extras: Map::new(),
        }
    }

    #[test]
    fn collection_rejects_duplicates_and_empty_names() {
        let err = ToolCollection::new(vec![tool("p", "a"), tool("p", "a")]).unwrap_err();
        assert_eq!(err, CollectionError::Duplicate(ToolRef::new("p", "a")));
        let err = ToolCollection::new(vec![tool("p", "")]).unwrap_err();
        assert!(matches!(err, CollectionError::EmptyApiName(_)));
        assert!(ToolCollection::new(vec![tool("p", "a"), tool("q", "a")]).is_ok());
    }

    #[test]
    fn schema_invariants() {
        let dup = ParameterSchema::new(vec![
            ParamSpec::required("x", ParamType::Int, ""),
            ParamSpec::optional("x", ParamType::Int, ""),
        ]);
        assert_eq!(dup.validate(), Err(SchemaError::DuplicateParam("x".into())));
        let mut p = ParamSpec::required("y", ParamType::Int, "");
        p.default = Some(json!(3));
        assert_eq!(
            ParameterSchema::new(vec![p]).validate(),
            Err(SchemaError::RequiredWithDefault("y".into()))
        );
    }

    #[test]
    fn example_arguments_must_be_declared() {
        let mut t = tool("p", "a");
        t.examples.push(ExampleCall {
            arguments: json!({"zzz": 1}).as_object().unwrap().clone(),
            response_digest: String::new(),
            success: true,
        });
        let c = ToolCollection::new(vec![t]).unwrap();
        assert!(matches!(c.check_examples(), Err(CollectionError::ExampleArgument { .. })));
    }

    #[test]
    fn query_requires_gt_in_candidates() {
        let q = Query {
            query_id: "q1".into(),
            text: "t".into(),
            ground_truth_sequence: vec![ToolRef::new("p", "a")],
            candidate_tools: vec![ToolRef::new("p", "b")],
            category: String::new(),
            split: Split::None,
            extras: Map::new(),
        };
        assert!(matches!(q.validate(), Err(QueryError::GroundTruthNotCandidate { .. })));
        let empty = Query { ground_truth_sequence: vec![], ..q };
        assert!(matches!(empty.validate(), Err(QueryError::EmptyGroundTruth(_))));
    }

    #[test]
    fn step_outcome_conjunction() {
        for s in [false, true] {
            for e in [false, true] {
                let o = StepOutcome::new(s, e);
                assert_eq!(o.subtask_success, s && e);
                assert!(o.is_consistent());
            }
        }
    }

    #[test]
    fn d0_is_never_overwritten() {
        let t = tool("p", "a");
        let mut store = DescriptionStore::new();
        store.insert(DescriptionVersion::original(&t));
        let mut fake = DescriptionVersion::original(&t);
        fake.text = "changed".into();
        store.insert(fake);
        assert_eq!(store.get(&t.tool_ref(), DescriptionLevel::D0).unwrap().text, "d");
    }

    #[test]
    fn response_status_serializes_with_param() {
        let s = serde_json::to_value(ResponseStatus::MissingRequiredParam("date".into())).unwrap();
        assert_eq!(s, json!({"kind": "missing_required_param", "param": "date"}));
        let ok = serde_json::to_value(ResponseStatus::Ok).unwrap();
        assert_eq!(ok, json!({"kind": "ok"}));
    }
}

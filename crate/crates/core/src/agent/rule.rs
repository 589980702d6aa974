use std::collections::BTreeSet;
use std::sync::OnceLock;

use regex::Regex;
use serde_json::{json, Value};

use super::{Agent, AgentError, ToolView};
use crate::gateway::extract_json_payload;
use crate::types::{JsonObject, ParamType, ToolRef, ToolResponse};

/// Marker preceding the response payload in a context digest.
pub const RESULT_MARKER: &str = "RESULT: ";

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "any", "are", "as", "at", "be", "by", "can", "do", "does", "each", "for", "from", "get", "given",
    "has", "have", "how", "i", "if", "in", "is", "it", "its", "me", "my", "of", "on", "one", "or", "our", "so", "some",
    "than", "that", "the", "their", "them", "then", "there", "these", "this", "to", "up", "us", "was", "we", "what",
    "when", "which", "will", "with", "you", "your",
];

/// Lower-cased content words with a naive plural fold.
pub fn tokens(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|w| w.len() > 1)
        .map(|w| w.to_ascii_lowercase())
        .filter(|w| !STOPWORDS.contains(&w.as_str()))
        .map(|w| {
            if w.len() > 3 && w.ends_with('s') && !w.ends_with("ss") {
                w[..w.len() - 1].to_string()
            } else {
                w
            }
        })
        .collect()
}

/// Machine-readable constraint attached to a parameter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConstraintRule {
    FromPreviousResponse { field: Option<String> },
    Ipv4,
    Integer,
    IsoDate,
    OneOf(Vec<String>),
    Uppercase,
    Provided,
    Omitted,
    Other(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Constraint {
    pub param: String,
    pub rule: ConstraintRule,
}

fn constraint_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"PARAM\s+([A-Za-z0-9_]+)\s+MUST\s+([^\n]+)").expect("constraint regex"))
}

fn ipv4_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b(?:\d{1,3}\.){3}\d{1,3}\b").expect("ipv4 regex"))
}

fn date_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b\d{4}-\d{2}-\d{2}\b").expect("date regex"))
}

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?:^|[^\w.])(-?\d+(?:\.\d+)?)(?:$|[^\w.])").expect("number regex"))
}

fn quoted_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"(?:^|[\s(:])['"]([^'"]+)['"]"#).expect("quote regex"))
}

fn parse_rule(raw: &str) -> ConstraintRule {
    let r = raw.trim().trim_end_matches('.').trim();
    let r = match r.find(" (") {
        Some(i) => &r[..i],
        None => r,
    };
    let lower = r.to_ascii_lowercase();
    if let Some(rest) = lower.strip_prefix("come from previous response") {
        let field = rest
            .trim()
            .strip_prefix("field")
            .map(|f| f.trim().trim_matches(|c| c == '`' || c == '\'' || c == '"').to_string())
            .filter(|f| !f.is_empty());
        return ConstraintRule::FromPreviousResponse { field };
    }
    if lower.contains("ipv4") {
        return ConstraintRule::Ipv4;
    }
    if lower == "be integer" || lower == "be an integer" {
        return ConstraintRule::Integer;
    }
    if lower.contains("yyyy-mm-dd") {
        return ConstraintRule::IsoDate;
    }
    if let Some(rest) = r.strip_prefix("be one of ") {
        let opts = rest
            .split(['|', ','])
            .map(|s| s.trim().trim_matches(|c| c == '\'' || c == '"').to_string())
            .filter(|s| !s.is_empty())
            .collect();
        return ConstraintRule::OneOf(opts);
    }
    match lower.as_str() {
        "be uppercase" => ConstraintRule::Uppercase,
        "be provided" | "be included" => ConstraintRule::Provided,
        "be omitted" | "not be sent" => ConstraintRule::Omitted,
        _ => ConstraintRule::Other(r.to_string()),
    }
}

/// Extracts every `PARAM <name> MUST <rule>` line from a description.
pub fn parse_constraints(description: &str) -> Vec<Constraint> {
    constraint_re()
        .captures_iter(description)
        .map(|c| Constraint {
            param: c[1].to_string(),
            rule: parse_rule(&c[2]),
        })
        .collect()
}

/// Context entry for step `step`: `STEP <t> RESULT: <observation>`.
pub fn digest_line(step: usize, observation: &str) -> String {
    format!("STEP {step} {RESULT_MARKER}{}", observation.replace('\n', " "))
}

fn find_key(v: &Value, key: &str) -> Option<Value> {
    match v {
        Value::Object(m) => {
            if let Some(x) = m.get(key) {
                return Some(x.clone());
            }
            m.values().find_map(|x| find_key(x, key))
        }
        Value::Array(a) => a.iter().find_map(|x| find_key(x, key)),
        _ => None,
    }
}

/// Most recent value of `key` in any JSON payload carried by the context.
pub fn find_in_context(context: &[String], key: &str) -> Option<Value> {
    context.iter().rev().find_map(|entry| {
        entry.lines().rev().find_map(|line| {
            let i = line.find(RESULT_MARKER)?;
            let payload = extract_json_payload(&line[i + RESULT_MARKER.len()..]).ok()?;
            find_key(&payload, key)
        })
    })
}

/// Deterministic agent: token-overlap selection and constraint-driven
/// parameter filling.
#[derive(Debug, Clone, Default)]
pub struct RuleAgent;

impl RuleAgent {
    pub fn new() -> Self {
        Self
    }

    pub fn score(subtask: &str, view: &ToolView) -> usize {
        let want = tokens(subtask);
        let have = tokens(&format!("{} {}", view.tool.api_name, view.description));
        want.intersection(&have).count()
    }

    /// Highest overlap wins; ties go to the lexicographically smallest
    /// `(api_name, provider_id)`.
    pub fn choose<'a>(subtask: &str, candidates: &'a [ToolView]) -> Option<&'a ToolView> {
        candidates.iter().min_by(|a, b| {
            let (sa, sb) = (Self::score(subtask, a), Self::score(subtask, b));
            sb.cmp(&sa)
                .then_with(|| a.tool.api_name.cmp(&b.tool.api_name))
                .then_with(|| a.tool.provider_id.cmp(&b.tool.provider_id))
        })
    }

    fn default_value(subtask: &str, ty: ParamType) -> Value {
        if matches!(ty, ParamType::Int | ParamType::Float) {
            if let Some(c) = number_re().captures(subtask) {
                let n = &c[1];
                if let Ok(i) = n.parse::<i64>() {
                    return json!(i);
                }
                if let Ok(f) = n.parse::<f64>() {
                    return json!(f);
                }
            }
        }
        if ty == ParamType::Bool {
            return json!(true);
        }
        match quoted_re().captures(subtask) {
            Some(c) => json!(c[1].to_string()),
            None => json!(subtask.trim()),
        }
    }

    fn apply(rule: &ConstraintRule, param: &str, ty: ParamType, subtask: &str, context: &[String]) -> Option<Value> {
        let haystack = || format!("{subtask}\n{}", context.join("\n"));
        match rule {
            ConstraintRule::FromPreviousResponse { field } => {
                find_in_context(context, field.as_deref().unwrap_or(param))
            }
            ConstraintRule::Ipv4 => ipv4_re().find(&haystack()).map(|m| json!(m.as_str())),
            ConstraintRule::IsoDate => date_re().find(&haystack()).map(|m| json!(m.as_str())),
            ConstraintRule::Integer => number_re()
                .captures(subtask)
                .and_then(|c| c[1].parse::<i64>().ok())
                .map(|n| json!(n)),
            ConstraintRule::OneOf(opts) => {
                let lower = subtask.to_ascii_lowercase();
                opts.iter()
                    .find(|o| lower.contains(&o.to_ascii_lowercase()))
                    .or(opts.first())
                    .map(|o| json!(o))
            }
            ConstraintRule::Uppercase => match Self::default_value(subtask, ty) {
                Value::String(s) => Some(json!(s.to_uppercase())),
                other => Some(other),
            },
            ConstraintRule::Provided | ConstraintRule::Other(_) => Some(Self::default_value(subtask, ty)),
            ConstraintRule::Omitted => None,
        }
    }

    /// Required parameters plus any parameter with a constraint line;
    /// constraints take precedence over the default guess.
    pub fn fill(subtask: &str, context: &[String], view: &ToolView) -> JsonObject {
        let constraints = parse_constraints(&view.description);
        let mut out = JsonObject::new();
        for p in &view.schema.parameters {
            let rules: Vec<&ConstraintRule> =
                constraints.iter().filter(|c| c.param == p.name).map(|c| &c.rule).collect();
            if rules.iter().any(|r| **r == ConstraintRule::Omitted) {
                continue;
            }
            if !p.required && rules.is_empty() {
                continue;
            }
            let value = rules
                .iter()
                .find_map(|r| Self::apply(r, &p.name, p.param_type, subtask, context))
                .unwrap_or_else(|| Self::default_value(subtask, p.param_type));
            out.insert(p.name.clone(), value);
        }
        out
    }
}

impl Agent for RuleAgent {
    fn name(&self) -> &str {
        "rule"
    }

    fn select_tool(&self, subtask: &str, _context: &[String], candidates: &[ToolView]) -> Result<ToolRef, AgentError> {
        Self::choose(subtask, candidates)
            .map(|v| v.tool.clone())
            .ok_or(AgentError::NoCandidates)
    }

    fn generate_params(&self, subtask: &str, context: &[String], tool: &ToolView) -> Result<JsonObject, AgentError> {
        Ok(Self::fill(subtask, context, tool))
    }

    fn process_response(
        &self,
        step: usize,
        subtask: &str,
        _context: &[String],
        response: Option<&ToolResponse>,
    ) -> Result<String, AgentError> {
        Ok(match response {
            Some(r) => digest_line(step, &r.observation()),
            None => digest_line(step, &format!("(processed) {subtask}")),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{ParamSpec, ParameterSchema};

    fn view(api: &str, desc: &str, params: Vec<ParamSpec>) -> ToolView {
        ToolView {
            tool: ToolRef::new("p", api),
            description: desc.into(),
            schema: ParameterSchema::new(params),
        }
    }

    #[test]
    fn constraint_lines_parse() {
        let c = parse_constraints(
            "Looks up a host.\nPARAM ip MUST be IPv4 (dotted quad).\nPARAM track_id MUST come from previous response\nPARAM mode MUST be one of fast|slow",
        );
        assert_eq!(c[0], Constraint { param: "ip".into(), rule: ConstraintRule::Ipv4 });
        assert_eq!(
            c[1].rule,
            ConstraintRule::FromPreviousResponse { field: None }
        );
        assert_eq!(c[2].rule, ConstraintRule::OneOf(vec!["fast".into(), "slow".into()]));
        let f = parse_constraints("PARAM x MUST come from previous response field ref");
        assert_eq!(f[0].rule, ConstraintRule::FromPreviousResponse { field: Some("ref".into()) });
    }

    #[test]
    fn ipv4_rule_applies() {
        let v = view(
            "lookup_host",
            "Looks up a host.\nPARAM ip MUST be IPv4",
            vec![ParamSpec::required("ip", ParamType::String, "")],
        );
        let p = RuleAgent::fill("Locate the host 'gw.example.net' at 10.0.0.1", &[], &v);
        assert_eq!(p["ip"], json!("10.0.0.1"));
    }

    #[test]
    fn without_constraint_raw_text_is_used() {
        let v = view("lookup_host", "Looks up a host.", vec![ParamSpec::required("ip", ParamType::String, "")]);
        let p = RuleAgent::fill("Locate the host 'gw.example.net' at 10.0.0.1", &[], &v);
        assert_eq!(p["ip"], json!("gw.example.net"));
    }

    #[test]
    fn previous_response_rule_reads_context() {
        let v = view(
            "get_track_details",
            "Pull up a track.\nPARAM track_id MUST come from previous response",
            vec![ParamSpec::required("track_id", ParamType::Int, "")],
        );
        let ctx = vec![
            digest_line(0, r#"{"track_id": 11, "name": "a"}"#),
            digest_line(1, r#"{"matches": [{"track_id": 42}]}"#),
        ];
        let p = RuleAgent::fill("pull up the full record for that track", &ctx, &v);
        assert_eq!(p["track_id"], json!(42));
        let bare = view("get_track_details", "Pull up a track.", v.schema.parameters.clone());
        let p = RuleAgent::fill("pull up the full record for that track", &ctx, &bare);
        assert_eq!(p["track_id"], json!("pull up the full record for that track"));
    }

    #[test]
    fn omitted_and_optional_params() {
        let v = view(
            "search",
            "Find.\nPARAM verbose MUST be omitted\nPARAM limit MUST be integer",
            vec![
                ParamSpec::required("query", ParamType::String, ""),
                ParamSpec::required("verbose", ParamType::Bool, ""),
                ParamSpec::optional("limit", ParamType::Int, ""),
                ParamSpec::optional("page", ParamType::Int, ""),
            ],
        );
        let p = RuleAgent::fill("find 'jazz' top 5", &[], &v);
        assert_eq!(p.get("query"), Some(&json!("jazz")));
        assert!(!p.contains_key("verbose"));
        assert_eq!(p.get("limit"), Some(&json!(5)));
        assert!(!p.contains_key("page"));
    }

    #[test]
    fn tie_breaks_lexicographically() {
        let c = vec![view("b_api", "weather data", vec![]), view("a_api", "weather data", vec![])];
        assert_eq!(RuleAgent.select_tool("weather", &[], &c).unwrap().api_name, "a_api");
    }

    #[test]
    fn selection_prefers_overlap() {
        let c = vec![
            view("search_tracks", "Find tracks matching a keyword.", vec![]),
            view("get_track_details", "Pull up the full record for one track.", vec![]),
        ];
        let s = RuleAgent.select_tool("pull up the full record for that track", &[], &c).unwrap();
        assert_eq!(s.api_name, "get_track_details");
    }

    #[test]
    fn digest_is_single_line() {
        let d = digest_line(3, "a\nb");
        assert_eq!(d, "STEP 3 RESULT: a b");
    }
}

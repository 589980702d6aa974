//! Agentic health annotation of API providers, and seed-provider filtering.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::gateway::{stage, Gateway, GatewayError};
use crate::prompts::{self, provider_schema_json, schema_inputs, tool_calling_line};
use crate::react::{run_loop, Action, ActionHandler, Handled, Turn, FINAL_ANSWER};
use crate::sandbox::ToolEnvironment;
use crate::types::{ExampleCall, Health, JsonObject, ToolCollection, ToolInterface};

pub const DEFAULT_BUDGET: usize = 40;
pub const DEFAULT_MIN_APIS: usize = 3;

pub const ANNOTATE_HEALTH: &str = "utility_annotate_health";
pub const ANNOTATE_EXAMPLE: &str = "utility_annotate_example";
pub const TAKE_NOTE: &str = "utility_take_note";

#[derive(Debug, thiserror::Error)]
pub enum AnnotatorError {
    #[error("unknown provider `{0}`")]
    UnknownProvider(String),
    #[error("step budget must be at least 1")]
    ZeroBudget,
    #[error("provider `{0}` has unannotated APIs")]
    Unannotated(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiAnnotation {
    pub health: Health,
    pub reason: String,
    #[serde(default)]
    pub examples: Vec<ExampleCall>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSession {
    pub provider_id: String,
    pub transcript: Vec<Turn>,
    pub step_budget: usize,
    /// True when the session ended through `final_answer`.
    pub finished: bool,
    pub result: BTreeMap<String, ApiAnnotation>,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl AnnotationSession {
    /// Writes health labels and examples into `collection`. Names, schemas
    /// and descriptions are left untouched.
    pub fn apply(&self, collection: &mut ToolCollection) {
        for (api, ann) in &self.result {
            let r = crate::types::ToolRef::new(&self.provider_id, api);
            if let Some(t) = collection.get_mut(&r) {
                t.health = ann.health;
                t.examples = ann.examples.clone();
                t.extras.insert("health_reason".into(), json!(ann.reason));
            }
        }
    }
}

struct Annotator<'a> {
    provider_id: &'a str,
    tools: Vec<&'a ToolInterface>,
    env: &'a dyn ToolEnvironment,
    seed: u64,
    result: BTreeMap<String, ApiAnnotation>,
    successes: Vec<(String, JsonObject, String)>,
    notes: Vec<String>,
}

impl Annotator<'_> {
    fn tool(&self, api: &str) -> Option<&ToolInterface> {
        self.tools.iter().copied().find(|t| t.api_name == api)
    }

    fn call(&mut self, tool: &ToolInterface, args: &Value) -> String {
        let Some(args) = args.as_object() else {
            return "Error: arguments must be a JSON object of parameter values".into();
        };
        match self.env.invoke(&tool.tool_ref(), args, self.seed) {
            Ok(resp) => {
                let obs = resp.observation();
                if resp.is_ok() {
                    self.successes.push((tool.api_name.clone(), args.clone(), obs.clone()));
                }
                obs
            }
            Err(e) => format!("Error: {e}"),
        }
    }

    fn annotate_health(&mut self, a: &Action) -> String {
        let api = a.arg_str("api_name").unwrap_or_default().to_string();
        if self.tool(&api).is_none() {
            return format!("Error: unknown API '{api}'");
        }
        let Some(health) = a.arg_str("health").and_then(Health::parse).filter(|h| *h != Health::Unannotated) else {
            return "Error: health must be one of \"good\", \"bad\" or \"unknown\"".into();
        };
        let reason = a.arg_str("reason").unwrap_or_default().to_string();
        let entry = self.result.entry(api.clone()).or_insert_with(|| ApiAnnotation {
            health,
            reason: String::new(),
            examples: Vec::new(),
        });
        entry.health = health;
        entry.reason = reason;
        format!("Health for API '{api}' annotated.")
    }

    fn annotate_example(&mut self, a: &Action) -> String {
        let api = a.arg_str("api_name").unwrap_or_default().to_string();
        let Some(tool) = self.tool(&api).cloned() else {
            return format!("Error: unknown API '{api}'");
        };
        let raw = a.arguments.get("example").cloned().unwrap_or(Value::Null);
        let parsed = match &raw {
            Value::String(s) => serde_json::from_str::<Value>(s).ok(),
            Value::Array(_) => Some(raw.clone()),
            _ => None,
        };
        let Some(list) = parsed.as_ref().and_then(Value::as_array).filter(|l| l.iter().all(Value::is_object)) else {
            return "Error: `example` must be a JSON string holding a list of argument objects, e.g. \"[{\\\"param\\\": \\\"value\\\"}]\"".into();
        };
        let mut examples = Vec::new();
        for args in list.iter().filter_map(Value::as_object) {
            let recorded = self
                .successes
                .iter()
                .find(|(n, a, _)| *n == api && a == args)
                .map(|(_, _, d)| d.clone());
            let (digest, success) = match recorded {
                Some(d) => (d, true),
                None => match self.env.invoke(&tool.tool_ref(), args, self.seed) {
                    Ok(r) => (r.observation(), r.is_ok()),
                    Err(e) => (format!("Error: {e}"), false),
                },
            };
            examples.push(ExampleCall {
                arguments: args.clone(),
                response_digest: digest,
                success,
            });
        }
        let entry = self.result.entry(api.clone()).or_insert_with(|| ApiAnnotation {
            health: Health::Unknown,
            reason: String::new(),
            examples: Vec::new(),
        });
        entry.examples.extend(examples);
        format!("Example for API '{api}' annotated.")
    }
}

impl ActionHandler for Annotator<'_> {
    fn handle(&mut self, a: &Action) -> Handled {
        match a.name.as_str() {
            FINAL_ANSWER => Handled::Finish("Annotated schema validated and saved.".into()),
            ANNOTATE_HEALTH => Handled::Continue(self.annotate_health(a)),
            ANNOTATE_EXAMPLE => Handled::Continue(self.annotate_example(a)),
            TAKE_NOTE => {
                self.notes.push(a.arg_str("note").unwrap_or_default().to_string());
                Handled::Continue("Note recorded.".into())
            }
            name => match self.tool(name).cloned() {
                Some(t) => Handled::Continue(self.call(&t, &a.arguments)),
                None => Handled::Continue(format!(
                    "Error: unknown tool '{name}'. Use only the listed tools of provider '{}' or the utilities.",
                    self.provider_id
                )),
            },
        }
    }
}

fn system_prompt(tools: &[&ToolInterface]) -> String {
    let mut lines: Vec<String> = tools
        .iter()
        .map(|t| tool_calling_line(&t.api_name, &t.description, &schema_inputs(&t.schema)))
        .collect();
    lines.push(tool_calling_line(
        ANNOTATE_HEALTH,
        "Record the health label of one API.",
        &json!({"api_name": {"type": "string"}, "health": {"type": "string", "enum": ["good", "bad", "unknown"]}, "reason": {"type": "string"}}),
    ));
    lines.push(tool_calling_line(
        ANNOTATE_EXAMPLE,
        "Record successful call examples of one API.",
        &json!({"api_name": {"type": "string"}, "example": {"type": "string", "description": "JSON list of argument objects"}}),
    ));
    lines.push(tool_calling_line(
        TAKE_NOTE,
        "Write down intermediate reasoning.",
        &json!({"note": {"type": "string"}}),
    ));
    lines.push(tool_calling_line(
        FINAL_ANSWER,
        "Finish with a concise summary.",
        &json!({"answer": {"type": "string"}}),
    ));
    prompts::ANNOTATOR_SYSTEM.replace("{tools}", &lines.join("\n"))
}

/// Runs one annotation session for `provider_id`.
pub fn run_annotation(
    provider_id: &str,
    collection: &ToolCollection,
    gateway: &Gateway,
    env: &dyn ToolEnvironment,
    budget: usize,
    seed: u64,
) -> Result<AnnotationSession, AnnotatorError> {
    if budget == 0 {
        return Err(AnnotatorError::ZeroBudget);
    }
    let tools = collection.provider_tools(provider_id);
    if tools.is_empty() {
        return Err(AnnotatorError::UnknownProvider(provider_id.to_string()));
    }
    let user = format!("{}{}", prompts::ANNOTATOR_USER, provider_schema_json(provider_id, &tools));
    let system = system_prompt(&tools);
    let mut handler = Annotator {
        provider_id,
        tools: tools.clone(),
        env,
        seed,
        result: BTreeMap::new(),
        successes: Vec::new(),
        notes: Vec::new(),
    };
    let outcome = run_loop(gateway, stage::ANNOTATE, &system, user, budget, &mut handler)?;
    let mut result = handler.result;
    for t in &tools {
        let e = result.entry(t.api_name.clone()).or_insert_with(|| ApiAnnotation {
            health: Health::Unknown,
            reason: "not annotated before the session ended".into(),
            examples: Vec::new(),
        });
        if e.health == Health::Unannotated {
            e.health = Health::Unknown;
        }
    }
    log::debug!("annotated {provider_id}: {} steps, finished={}", outcome.transcript.len(), outcome.finished);
    Ok(AnnotationSession {
        provider_id: provider_id.to_string(),
        transcript: outcome.transcript,
        step_budget: budget,
        finished: outcome.finished,
        result,
        notes: handler.notes,
    })
}

/// Annotates every provider in parallel and returns the annotated copy.
pub fn annotate_collection(
    collection: &ToolCollection,
    gateway: &Gateway,
    env: &dyn ToolEnvironment,
    budget: usize,
    seed: u64,
) -> Result<(ToolCollection, Vec<AnnotationSession>), AnnotatorError> {
    let sessions = collection
        .providers()
        .par_iter()
        .map(|p| run_annotation(p, collection, gateway, env, budget, seed))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = collection.clone();
    for s in &sessions {
        s.apply(&mut out);
    }
    Ok((out, sessions))
}

/// Providers whose APIs are all `good`, that are not blocklisted and that
/// expose at least `min_apis` APIs.
pub fn filter_seed_tools(
    collection: &ToolCollection,
    blocklist: &BTreeSet<String>,
    min_apis: usize,
) -> Result<Vec<String>, AnnotatorError> {
    let mut kept = Vec::new();
    for p in collection.providers() {
        let tools = collection.provider_tools(&p);
        if tools.iter().any(|t| t.health == Health::Unannotated) {
            return Err(AnnotatorError::Unannotated(p));
        }
        if tools.len() >= min_apis && !blocklist.contains(&p) && tools.iter().all(|t| t.health == Health::Good) {
            kept.push(p);
        }
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ScriptBook, ScriptEntry, ScriptMatcher};
    use crate::sandbox::{build_synthetic_universe, UniverseConfig};
    use crate::types::{ParamSpec, ParamType, ParameterSchema};
    use proptest::prelude::*;

    fn tool(p: &str, a: &str, h: Health) -> ToolInterface {
        ToolInterface {
            provider_id: p.into(),
            api_name: a.into(),
            description: String::new(),
            schema: ParameterSchema::new(vec![ParamSpec::required("q", ParamType::String, "")]),
            category: "c".into(),
            health: h,
            examples: Vec::new(),
            extras: Default::default(),
        }
    }

    fn scripted(actions: &[Action]) -> Gateway {
        Gateway::mock(ScriptBook::from_entries(
            actions
                .iter()
                .enumerate()
                .map(|(i, a)| ScriptEntry::new(ScriptMatcher::stage(stage::ANNOTATE).at_turn(i), a.render()))
                .collect(),
        ))
    }

    #[test]
    fn scripted_good_session() {
        let u = build_synthetic_universe(&UniverseConfig::new(1, 3, 1, 7));
        let sb = u.sandbox().unwrap();
        let t = &u.collection.tools()[0];
        let kw = "jazz";
        let g = scripted(&[
            Action::new(&t.api_name, json!({"query": kw})),
            Action::new(ANNOTATE_HEALTH, json!({"api_name": t.api_name, "health": "good", "reason": "ok"})),
            Action::new(ANNOTATE_EXAMPLE, json!({"api_name": t.api_name, "example": format!("[{{\"query\": \"{kw}\"}}]")})),
            Action::new(FINAL_ANSWER, json!({"answer": "done"})),
        ]);
        let s = run_annotation(&t.provider_id, &u.collection, &g, &sb, 10, 0).unwrap();
        assert!(s.finished);
        assert_eq!(s.transcript[1].observation, format!("Health for API '{}' annotated.", t.api_name));
        let a = &s.result[&t.api_name];
        assert_eq!(a.health, Health::Good);
        assert_eq!(a.examples.len(), 1);
        assert!(a.examples[0].success);
        // the other two apis were never labeled
        assert_eq!(s.result.values().filter(|a| a.health == Health::Unknown).count(), 2);
    }

    #[test]
    fn budget_exhaustion_marks_unknown() {
        let u = build_synthetic_universe(&UniverseConfig::new(1, 3, 1, 7));
        let sb = u.sandbox().unwrap();
        let g = scripted(&[Action::new(TAKE_NOTE, json!({"note": "thinking"}))]);
        let p = &u.collection.providers()[0];
        let s = run_annotation(p, &u.collection, &g, &sb, 1, 0).unwrap();
        assert!(!s.finished);
        assert!(s.result.values().all(|a| a.health == Health::Unknown));
        assert_eq!(s.result.len(), 3);
    }

    #[test]
    fn errors_become_observations() {
        let u = build_synthetic_universe(&UniverseConfig::new(1, 3, 1, 7));
        let sb = u.sandbox().unwrap();
        let api = u.collection.tools()[0].api_name.clone();
        let g = scripted(&[
            Action::new("nope", json!({})),
            Action::new(ANNOTATE_EXAMPLE, json!({"api_name": api, "example": "not json"})),
            Action::new(ANNOTATE_HEALTH, json!({"api_name": api, "health": "bad", "reason": "a"})),
            Action::new(ANNOTATE_HEALTH, json!({"api_name": api, "health": "good", "reason": "b"})),
            Action::new(FINAL_ANSWER, json!({"answer": "done"})),
        ]);
        let p = &u.collection.providers()[0];
        let s = run_annotation(p, &u.collection, &g, &sb, 10, 0).unwrap();
        assert!(s.transcript[0].observation.starts_with("Error: unknown tool 'nope'"));
        assert!(s.transcript[1].observation.starts_with("Error: `example`"));
        assert_eq!(s.result[&api].health, Health::Good);
        assert_eq!(s.result[&api].reason, "b");
    }

    #[test]
    fn simulated_labels_match_ground_truth() {
        let u = build_synthetic_universe(&UniverseConfig::new(6, 3, 3, 11).with_broken(0.34));
        let sb = u.sandbox().unwrap();
        let g = Gateway::simulated();
        let (annotated, sessions) = annotate_collection(&u.collection, &g, &sb, DEFAULT_BUDGET, 0).unwrap();
        assert!(sessions.iter().all(|s| s.finished));
        for t in annotated.iter() {
            assert_eq!(t.health, u.expected_health(&t.tool_ref()), "{}", t.tool_ref());
            if t.health == Health::Good {
                assert!(!t.examples.is_empty());
            }
        }
        assert_eq!(annotated.refs(), u.collection.refs());
    }

    #[test]
    fn filter_rules() {
        let c = ToolCollection::new(vec![
            tool("a", "x", Health::Good),
            tool("a", "y", Health::Good),
            tool("a", "z", Health::Good),
            tool("b", "x", Health::Good),
            tool("b", "y", Health::Unknown),
            tool("b", "z", Health::Good),
            tool("c", "x", Health::Good),
            tool("c", "y", Health::Good),
        ])
        .unwrap();
        assert_eq!(filter_seed_tools(&c, &BTreeSet::new(), 3).unwrap(), vec!["a".to_string()]);
        assert_eq!(filter_seed_tools(&c, &BTreeSet::new(), 2).unwrap(), vec!["a".to_string(), "c".to_string()]);
        assert!(filter_seed_tools(&c, &["a".to_string()].into(), 3).unwrap().is_empty());
        let mut c2 = c.clone();
        c2.insert(tool("d", "x", Health::Unannotated)).unwrap();
        assert!(matches!(filter_seed_tools(&c2, &BTreeSet::new(), 3), Err(AnnotatorError::Unannotated(p)) if p == "d"));
    }

    proptest! {
        #[test]
        fn filter_monotone_in_blocklist(healths in proptest::collection::vec(0u8..3, 1..24), block in proptest::collection::btree_set(0usize..8, 0..8), drop in 0usize..8) {
            let mut tools = Vec::new();
            for (i, h) in healths.iter().enumerate() {
                let h = [Health::Good, Health::Bad, Health::Unknown][*h as usize];
                tools.push(tool(&format!("p{}", i % 8), &format!("a{i}"), h));
            }
            let c = ToolCollection::new(tools).unwrap();
            let big: BTreeSet<String> = block.iter().map(|i| format!("p{i}")).collect();
            let mut small = big.clone();
            small.remove(&format!("p{drop}"));
            let kept_big = filter_seed_tools(&c, &big, 2).unwrap();
            let kept_small: BTreeSet<String> = filter_seed_tools(&c, &small, 2).unwrap().into_iter().collect();
            prop_assert!(kept_big.iter().all(|p| kept_small.contains(p)));
        }
    }
}

//! Dependency-aware query synthesis and free-agent trace collection.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::agent::{digest_line, Agent, ToolView};
use crate::gateway::{stage, Gateway, GatewayError};
use crate::prompts;
use crate::sandbox::ToolEnvironment;
use crate::types::{
    CallCounts, FailureExample, Health, Query, ResponseStatus, SuccessExample, TerminalStatus, ToolCollection,
    ToolInterface, ToolRef, ToolResponse, ToolTraceSummary, Trace, TraceStep,
};

pub const PLAN_SIZE: usize = 3;
pub const DEFAULT_EXEMPLARS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencyPlan {
    pub provider_id: String,
    pub selected_apis: Vec<String>,
    pub analysis: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryValidation {
    pub no_api_names_in_text: bool,
    pub multi_step: bool,
}

impl QueryValidation {
    pub fn accepted(&self) -> bool {
        self.no_api_names_in_text && self.multi_step
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesizedQuery {
    #[serde(flatten)]
    pub query: Query,
    pub plan: DependencyPlan,
    pub validation: QueryValidation,
}

#[derive(Debug, thiserror::Error)]
pub enum SynthesisError {
    #[error("provider `{provider}` has {found} good APIs with examples, {needed} needed")]
    Precondition {
        provider: String,
        found: usize,
        needed: usize,
    },
    #[error("query rejected: {reason}")]
    Rejected { reason: String, text: String },
    #[error("malformed model output: {0}")]
    Malformed(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

fn normalize(s: &str) -> String {
    s.to_lowercase().replace('_', " ")
}

/// Checks that no API name leaks into the text and that the plan has
/// `plan_size` distinct APIs from the provider.
pub fn validate_query(text: &str, plan: &[String], provider_apis: &[String], plan_size: usize) -> QueryValidation {
    let t = normalize(text);
    let no_names = provider_apis.iter().all(|a| !t.contains(&normalize(a)));
    let distinct: BTreeSet<&String> = plan.iter().collect();
    let multi_step = plan.len() == plan_size && distinct.len() == plan.len() && plan.iter().all(|p| provider_apis.contains(p));
    QueryValidation {
        no_api_names_in_text: no_names,
        multi_step,
    }
}

fn usable(t: &ToolInterface) -> bool {
    t.health == Health::Good && t.examples.iter().any(|e| e.success)
}

/// Provider APIs with their annotated examples, as shown to the planner.
pub fn provider_context_json(provider_id: &str, tools: &[&ToolInterface]) -> Value {
    json!({
        "provider": provider_id,
        "apis": tools.iter().map(|t| json!({
            "name": t.api_name,
            "description": t.description,
            "parameters": &t.schema.parameters,
            "examples": t.examples.iter().filter(|e| e.success).map(|e| json!({
                "arguments": e.arguments,
                "response_digest": e.response_digest,
            })).collect::<Vec<_>>(),
        })).collect::<Vec<_>>(),
    })
}

/// Plans a dependent API chain for `provider_id` and writes one query for it.
pub fn synthesize_query(
    provider_id: &str,
    collection: &ToolCollection,
    gateway: &Gateway,
    plan_size: usize,
    query_id: &str,
) -> Result<SynthesizedQuery, SynthesisError> {
    let tools: Vec<&ToolInterface> = collection.provider_tools(provider_id).into_iter().filter(|t| usable(t)).collect();
    if tools.len() < plan_size {
        return Err(SynthesisError::Precondition {
            provider: provider_id.to_string(),
            found: tools.len(),
            needed: plan_size,
        });
    }
    let ctx = provider_context_json(provider_id, &tools);
    let req = gateway.request(stage::SYNTH_PLAN, prompts::SYNTH_PLAN_SYSTEM, prompts::synth_plan_user(&ctx, plan_size));
    let v = gateway.complete_json(&req)?;
    let selected: Vec<String> = v
        .get("selected_apis")
        .and_then(Value::as_array)
        .ok_or_else(|| SynthesisError::Malformed(format!("plan without selected_apis: {v}")))?
        .iter()
        .filter_map(|a| a.as_str().map(str::to_string))
        .collect();
    let plan = DependencyPlan {
        provider_id: provider_id.to_string(),
        selected_apis: selected,
        analysis: v.get("analysis").and_then(Value::as_str).unwrap_or_default().to_string(),
    };
    let req = gateway.request(
        stage::SYNTH_QUERY,
        prompts::SYNTH_QUERY_SYSTEM,
        prompts::synth_query_user(&ctx, &json!({"selected_apis": plan.selected_apis})),
    );
    let v = gateway.complete_json(&req)?;
    let text = v
        .get("query")
        .and_then(Value::as_str)
        .ok_or_else(|| SynthesisError::Malformed(format!("no query field: {v}")))?
        .trim()
        .to_string();
    let names: Vec<String> = collection.provider_tools(provider_id).iter().map(|t| t.api_name.clone()).collect();
    let validation = validate_query(&text, &plan.selected_apis, &names, plan_size);
    if !validation.no_api_names_in_text {
        return Err(SynthesisError::Rejected {
            reason: "no_api_names_in_text".into(),
            text,
        });
    }
    if !validation.multi_step {
        return Err(SynthesisError::Rejected {
            reason: "multi_step".into(),
            text,
        });
    }
    let query = Query {
        query_id: query_id.to_string(),
        text,
        ground_truth_sequence: plan.selected_apis.iter().map(|a| ToolRef::new(provider_id, a)).collect(),
        candidate_tools: tools.iter().map(|t| t.tool_ref()).collect(),
        category: collection.category_of_provider(provider_id).unwrap_or_default().to_string(),
        split: Default::default(),
        extras: Default::default(),
    };
    Ok(SynthesizedQuery { query, plan, validation })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub provider_id: String,
    pub reason: String,
}

/// One query per provider, in parallel; failures are returned alongside.
pub fn synthesize_queries(
    providers: &[String],
    collection: &ToolCollection,
    gateway: &Gateway,
    plan_size: usize,
) -> (Vec<SynthesizedQuery>, Vec<Rejection>) {
    let results: Vec<(String, Result<SynthesizedQuery, SynthesisError>)> = providers
        .par_iter()
        .map(|p| (p.clone(), synthesize_query(p, collection, gateway, plan_size, &format!("{p}-q0"))))
        .collect();
    let mut ok = Vec::new();
    let mut rejected = Vec::new();
    for (p, r) in results {
        match r {
            Ok(q) => ok.push(q),
            Err(e) => rejected.push(Rejection {
                provider_id: p,
                reason: e.to_string(),
            }),
        }
    }
    (ok, rejected)
}

fn agent_error(e: impl std::fmt::Display) -> ToolResponse {
    ToolResponse::error(ResponseStatus::ServerError, format!("Error: agent failure: {e}"))
}

/// Runs `agent` freely over one query.
pub fn trace_query(
    query: &Query,
    agent: &dyn Agent,
    views: &BTreeMap<ToolRef, ToolView>,
    env: &dyn ToolEnvironment,
    seed: u64,
) -> Trace {
    let candidates: Vec<ToolView> = query.candidate_tools.iter().filter_map(|t| views.get(t).cloned()).collect();
    let budget = 2 * query.ground_truth_sequence.len();
    let mut steps: Vec<TraceStep> = Vec::new();
    let mut context: Vec<String> = Vec::new();
    let plan = match agent.plan(&query.text, &candidates) {
        Ok(p) => p,
        Err(e) => {
            log::warn!("{}: planning failed: {e}", query.query_id);
            return Trace {
                query_id: query.query_id.clone(),
                steps,
                terminal_status: TerminalStatus::Failure,
                ground_truth_sequence: query.ground_truth_sequence.clone(),
            };
        }
    };
    let mut gt = query.ground_truth_sequence.iter();
    let mut truncated = false;
    for (i, sub) in plan.iter().enumerate() {
        if steps.len() >= budget {
            truncated = true;
            break;
        }
        if !sub.needs_api {
            let digest = agent
                .process_response(i, &sub.text, &context, None)
                .unwrap_or_else(|e| digest_line(i, &format!("Error: {e}")));
            steps.push(TraceStep {
                index: i,
                input: sub.text.clone(),
                selected_tool: None,
                parameters: Default::default(),
                output: ToolResponse::ok(Value::String(digest.clone())),
                gt_tool: None,
                needs_api: false,
            });
            context.push(digest);
            continue;
        }
        let gt_tool = gt.next().cloned();
        let (selected, parameters, output) = match agent.select_tool(&sub.text, &context, &candidates) {
            Err(e) => (None, Default::default(), agent_error(e)),
            Ok(sel) => match views.get(&sel) {
                None => (Some(sel.clone()), Default::default(), agent_error(format!("unknown tool {sel}"))),
                Some(view) => match agent.generate_params(&sub.text, &context, view) {
                    Err(e) => (Some(sel), Default::default(), agent_error(e)),
                    Ok(p) => {
                        let out = env
                            .invoke(&sel, &p, seed)
                            .unwrap_or_else(|e| ToolResponse::error(ResponseStatus::NotFound, format!("Error: {e}")));
                        (Some(sel), p, out)
                    }
                },
            },
        };
        let digest = agent
            .process_response(i, &sub.text, &context, Some(&output))
            .unwrap_or_else(|_| digest_line(i, &output.observation()));
        context.push(digest);
        steps.push(TraceStep {
            index: i,
            input: sub.text.clone(),
            selected_tool: selected,
            parameters,
            output,
            gt_tool,
            needs_api: true,
        });
    }
    let covered = gt.next().is_none();
    let terminal_status = if truncated {
        TerminalStatus::BudgetExhausted
    } else if !covered {
        TerminalStatus::Failure
    } else {
        Trace::derived_status(&steps)
    };
    Trace {
        query_id: query.query_id.clone(),
        steps,
        terminal_status,
        ground_truth_sequence: query.ground_truth_sequence.clone(),
    }
}

/// Free-agent traces for every query, in parallel, order preserved.
pub fn collect_traces(
    queries: &[Query],
    agent: &dyn Agent,
    views: &BTreeMap<ToolRef, ToolView>,
    env: &dyn ToolEnvironment,
    seed: u64,
) -> Vec<Trace> {
    queries.par_iter().map(|q| trace_query(q, agent, views, env, seed)).collect()
}

/// Per-tool call counts with the first `k` success and failure exemplars.
pub fn summarize_per_tool(traces: &[Trace], k: usize) -> BTreeMap<ToolRef, ToolTraceSummary> {
    let mut out: BTreeMap<ToolRef, ToolTraceSummary> = BTreeMap::new();
    for step in traces.iter().flat_map(|t| &t.steps) {
        let Some(tool) = step.selected_tool.as_ref().filter(|_| step.needs_api) else {
            continue;
        };
        let s = out.entry(tool.clone()).or_insert_with(|| ToolTraceSummary {
            tool: tool.clone(),
            success_examples: Vec::new(),
            failure_examples: Vec::new(),
            counts: CallCounts::default(),
        });
        s.counts.calls += 1;
        if step.output.is_ok() {
            s.counts.successes += 1;
            if s.success_examples.len() < k {
                s.success_examples.push(SuccessExample {
                    args: step.parameters.clone(),
                    response_digest: step.output.observation(),
                });
            }
        } else {
            s.counts.failures += 1;
            if s.failure_examples.len() < k {
                s.failure_examples.push(FailureExample {
                    args: step.parameters.clone(),
                    error_message: step.output.observation(),
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{tool_views, RuleAgent};
    use crate::annotator::{annotate_collection, DEFAULT_BUDGET};
    use crate::gateway::{ScriptBook, ScriptEntry, ScriptMatcher};
    use crate::sandbox::{build_synthetic_universe, Universe, UniverseConfig};
    use crate::types::{DescriptionLevel, JsonObject};
    use proptest::prelude::*;

    fn annotated(n: usize) -> (Universe, ToolCollection) {
        let u = build_synthetic_universe(&UniverseConfig::new(n, 3, 2, 5));
        let sb = u.sandbox().unwrap();
        let (c, _) = annotate_collection(&u.collection, &Gateway::simulated(), &sb, DEFAULT_BUDGET, 0).unwrap();
        (u, c)
    }

    #[test]
    fn validator() {
        let apis = vec!["search_items".to_string(), "get_item".to_string(), "get_reviews".to_string()];
        let v = validate_query("Find the best-reviewed gadget under $50", &apis, &apis, 3);
        assert!(v.accepted());
        let v = validate_query("Call get_item please", &apis, &apis, 3);
        assert!(!v.no_api_names_in_text);
        let v = validate_query("Please GET ITEM now", &apis, &apis, 3);
        assert!(!v.no_api_names_in_text);
        assert!(!validate_query("x", &apis[..2], &apis, 3).multi_step);
    }

    #[test]
    fn simulated_synthesis_follows_dependencies() {
        let (u, c) = annotated(2);
        let p = &c.providers()[0];
        let q = synthesize_query(p, &c, &Gateway::simulated(), PLAN_SIZE, "q").unwrap();
        assert!(q.validation.accepted());
        let names: Vec<String> = c.provider_tools(p).iter().map(|t| t.api_name.clone()).collect();
        assert_eq!(q.plan.selected_apis, names);
        assert_eq!(q.query.ground_truth_sequence.len(), 3);
        assert!(q.query.text.contains(", then "));
        assert_eq!(u.dependencies[p].len(), 2);
    }

    #[test]
    fn scripted_rejection_and_precondition() {
        let (_, c) = annotated(1);
        let p = c.providers()[0].clone();
        let names: Vec<String> = c.provider_tools(&p).iter().map(|t| t.api_name.clone()).collect();
        let book = ScriptBook::from_entries(vec![
            ScriptEntry::new(ScriptMatcher::stage(stage::SYNTH_PLAN), json!({"analysis": "", "selected_apis": names}).to_string()),
            ScriptEntry::new(ScriptMatcher::stage(stage::SYNTH_QUERY), json!({"query": format!("use {}", names[1])}).to_string()),
        ]);
        let e = synthesize_query(&p, &c, &Gateway::mock(book), 3, "q").unwrap_err();
        assert!(matches!(e, SynthesisError::Rejected { ref reason, .. } if reason == "no_api_names_in_text"));
        let mut c2 = c.clone();
        let r = ToolRef::new(&p, &names[2]);
        c2.get_mut(&r).unwrap().health = Health::Bad;
        assert!(matches!(
            synthesize_query(&p, &c2, &Gateway::simulated(), 3, "q"),
            Err(SynthesisError::Precondition { found: 2, .. })
        ));
    }

    #[test]
    fn traces_d0_vs_d2() {
        let (u, c) = annotated(1);
        let sb = u.sandbox().unwrap();
        let q = synthesize_query(&c.providers()[0], &c, &Gateway::simulated(), 3, "q").unwrap().query;
        let views = tool_views(&c, None, DescriptionLevel::D0);
        let t = &collect_traces(std::slice::from_ref(&q), &RuleAgent::new(), &views, &sb, 0)[0];
        assert!(t.indices_contiguous());
        assert_eq!(t.steps.len(), 4);
        assert_eq!(t.terminal_status, TerminalStatus::Failure);
        assert!(t.steps[0].output.is_ok());
        assert!(matches!(t.steps[2].output.status, ResponseStatus::TypeError(_)));
        // context injected into later steps carries the previous digest marker
        let mut views2 = views.clone();
        for (r, v) in views2.iter_mut() {
            for p in &v.schema.parameters {
                if p.name.ends_with("_id") {
                    v.description.push_str(&format!("\nPARAM {} MUST come from previous response", p.name));
                }
            }
            let _ = r;
        }
        let t2 = &collect_traces(&[q], &RuleAgent::new(), &views2, &sb, 0)[0];
        assert_eq!(t2.terminal_status, TerminalStatus::Success);
        assert!(t2.steps.iter().filter(|s| s.needs_api).count() == 3);
        assert!(collect_traces(&[], &RuleAgent::new(), &views2, &sb, 0).is_empty());
    }

    fn step(tool: &str, ok: bool, i: usize) -> TraceStep {
        let mut args = JsonObject::new();
        args.insert("i".into(), json!(i));
        TraceStep {
            index: i,
            input: String::new(),
            selected_tool: Some(ToolRef::new("p", tool)),
            parameters: args,
            output: if ok {
                ToolResponse::ok(json!({"n": i}))
            } else {
                ToolResponse::error(ResponseStatus::MissingRequiredParam("x".into()), "Error: Missing required parameter 'x'")
            },
            gt_tool: None,
            needs_api: true,
        }
    }

    #[test]
    fn summary_counts_and_first_k() {
        let tr = Trace {
            query_id: "q".into(),
            steps: vec![step("x", true, 0), step("x", false, 1), step("x", true, 2), step("x", false, 3), step("x", true, 4)],
            terminal_status: TerminalStatus::Failure,
            ground_truth_sequence: vec![],
        };
        let s = summarize_per_tool(std::slice::from_ref(&tr), 3);
        let x = &s[&ToolRef::new("p", "x")];
        assert_eq!((x.counts.calls, x.counts.successes, x.counts.failures), (5, 3, 2));
        assert_eq!(x.success_examples.len(), 3);
        assert_eq!(x.failure_examples.len(), 2);
        let s1 = summarize_per_tool(&[tr], 1);
        let x = &s1[&ToolRef::new("p", "x")];
        assert_eq!(x.success_examples[0].args["i"], 0);
        assert_eq!(x.failure_examples[0].args["i"], 1);
        assert!(!s1.contains_key(&ToolRef::new("p", "never")));
    }

    proptest! {
        #[test]
        fn summary_matches_recount(calls in proptest::collection::vec((0u8..4, any::<bool>()), 0..60), k in 0usize..5) {
            let steps: Vec<TraceStep> = calls.iter().enumerate().map(|(i, (t, ok))| step(&format!("t{t}"), *ok, i)).collect();
            let traces: Vec<Trace> = steps.chunks(7).map(|c| Trace {
                query_id: "q".into(),
                steps: c.to_vec(),
                terminal_status: TerminalStatus::Failure,
                ground_truth_sequence: vec![],
            }).collect();
            let s = summarize_per_tool(&traces, k);
            for t in 0u8..4 {
                let name = format!("t{t}");
                let n = calls.iter().filter(|(x, _)| *x == t).count();
                let ok = calls.iter().filter(|(x, o)| *x == t && *o).count();
                match s.get(&ToolRef::new("p", &name)) {
                    None => prop_assert_eq!(n, 0),
                    Some(x) => {
                        prop_assert_eq!(x.counts.calls, n);
                        prop_assert_eq!(x.counts.successes, ok);
                        prop_assert_eq!(x.counts.failures, n - ok);
                        prop_assert_eq!(x.success_examples.len(), ok.min(k));
                        prop_assert_eq!(x.failure_examples.len(), (n - ok).min(k));
                    }
                }
            }
        }

        #[test]
        fn validator_pure(text in "[a-z_ ]{0,40}") {
            let apis = vec!["get_item".to_string()];
            prop_assert_eq!(validate_query(&text, &apis, &apis, 1), validate_query(&text, &apis, &apis, 1));
        }
    }
}

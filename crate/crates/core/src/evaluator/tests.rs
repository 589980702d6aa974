use super::*;
use crate::agent::RuleAgent;
use crate::gateway::{ScriptBook, ScriptEntry, ScriptMatcher};
use crate::pipeline::prepare;
use crate::sandbox::{build_synthetic_universe, UniverseConfig};
use proptest::prelude::*;
use serde_json::json;

fn cfg(level: DescriptionLevel, seed: u64) -> EvalConfig {
    EvalConfig {
        level,
        seed,
        exec_scoring: ExecScoring::Gt,
        scale_n: None,
        agent: "rule".into(),
        model_id: "simulated".into(),
    }
}

#[test]
fn scripted_decomposition() {
    let u = build_synthetic_universe(&UniverseConfig::new(1, 3, 1, 2));
    let tools = u.collection.provider_tools(&u.collection.providers()[0]);
    let q = Query {
        query_id: "q".into(),
        text: "three things".into(),
        ground_truth_sequence: vec![tools[0].tool_ref(), tools[1].tool_ref()],
        candidate_tools: tools.iter().map(|t| t.tool_ref()).collect(),
        category: String::new(),
        split: Default::default(),
        extras: Default::default(),
    };
    let ann = |needs: bool, api: &str| json!({"needs_api": needs, "api_name": api, "confidence": 0.8, "reasoning": "r"}).to_string();
    let book = ScriptBook::from_entries(vec![
        ScriptEntry::new(ScriptMatcher::stage(stage::DECOMPOSE), json!({"subtasks": ["a", "b", "c"]}).to_string()),
        ScriptEntry::new(ScriptMatcher::stage(stage::ANNOTATE_SUBTASK).containing("Subtask Input: a\n"), ann(true, &tools[0].api_name)),
        ScriptEntry::new(ScriptMatcher::stage(stage::ANNOTATE_SUBTASK).containing("Subtask Input: b\n"), ann(false, "")),
        ScriptEntry::new(ScriptMatcher::stage(stage::ANNOTATE_SUBTASK).containing("Subtask Input: c\n"), ann(true, "")),
    ]);
    let g = Gateway::mock(book);
    let t = decompose_and_annotate(&q, &u.collection, &g);
    assert_eq!(g.calls_used(), 4);
    assert_eq!(t.subtasks.iter().map(|s| s.needs_api).collect::<Vec<_>>(), [true, false, true]);
    assert_eq!(t.gt_tools().len(), 2);
    assert!(t.is_well_formed());
    // unmatched annotation falls back to the next ground-truth step
    assert_eq!(t.subtasks[2].gt_api.as_ref(), Some(&tools[1].tool_ref()));
    assert_eq!(t.subtasks[0].confidence, 0.8);
}

#[test]
fn processing_example_from_the_prompt() {
    let u = build_synthetic_universe(&UniverseConfig::new(1, 3, 1, 2));
    let tools = u.collection.provider_tools(&u.collection.providers()[0]);
    let q = Query {
        query_id: "q".into(),
        text: "Find movies matching 'noir', then count how many are comedies from the results".into(),
        ground_truth_sequence: vec![tools[0].tool_ref()],
        candidate_tools: vec![tools[0].tool_ref()],
        category: String::new(),
        split: Default::default(),
        extras: Default::default(),
    };
    let t = decompose_and_annotate(&q, &u.collection, &Gateway::simulated());
    assert_eq!(t.subtasks.len(), 2);
    assert!(!t.subtasks[1].needs_api);
    assert!(t.subtasks[1].gt_api.is_none());
}

#[test]
fn d2_beats_d0_and_shares_decompositions() {
    let u = build_synthetic_universe(&UniverseConfig::new(8, 3, 3, 5));
    let g = Gateway::simulated();
    let p = prepare(&u, &g, 0).unwrap();
    assert!(!p.queries.is_empty());
    let cache = DecompositionCache::new();
    let agent = RuleAgent::new();
    let d0 = evaluate(&p.queries, &p.annotated, &p.store, &agent, &p.sandbox, &g, &cache, &cfg(DescriptionLevel::D0, 1)).unwrap();
    let calls = g.calls_used();
    let d2 = evaluate(&p.queries, &p.annotated, &p.store, &agent, &p.sandbox, &g, &cache, &cfg(DescriptionLevel::D2, 1)).unwrap();
    assert_eq!(g.calls_used(), calls, "second level reuses every decomposition");
    assert_eq!(serde_json::to_string(&d0.tasks).unwrap(), serde_json::to_string(&d2.tasks).unwrap());
    assert!(d2.report.sl_rate.value() > d0.report.sl_rate.value(), "{} vs {}", d2.report.sl_rate.value(), d0.report.sl_rate.value());
    let subtasks: usize = d0.tasks.iter().map(|t| t.subtasks.len()).sum();
    assert_eq!(d0.steps.len(), subtasks);
    assert!(d2.levels_used.values().all(|l| *l == DescriptionLevel::D2));

    // teacher forcing: step t sees the digest produced at step t-1
    for run in [&d0, &d2] {
        for w in run.steps.windows(2) {
            if w[0].query_id == w[1].query_id {
                assert_eq!(w[1].context_in.last(), Some(&w[0].processed));
                if let Some(r) = &w[0].gt_response {
                    assert!(w[0].processed.contains(&r.observation()));
                }
            }
        }
        assert!(run.steps.iter().all(|s| s.outcome.is_consistent()));
    }

    let dir = tempfile::tempdir().unwrap();
    d2.persist(dir.path()).unwrap();
    assert_eq!(EvalRun::load_report(dir.path()).unwrap(), d2.report);
    let lines = std::fs::read_to_string(dir.path().join("steps.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), d2.steps.len());

    assert!(matches!(
        evaluate(&[], &p.annotated, &p.store, &agent, &p.sandbox, &g, &cache, &cfg(DescriptionLevel::D0, 1)),
        Err(EvalError::NoQueries)
    ));
    let bare = DescriptionStore::from_collection(&p.annotated);
    assert!(matches!(
        evaluate(&p.queries, &p.annotated, &bare, &agent, &p.sandbox, &g, &cache, &cfg(DescriptionLevel::D2, 1)),
        Err(EvalError::LevelMissing("d2"))
    ));
}

struct WrongPicker;

impl Agent for WrongPicker {
    fn name(&self) -> &str {
        "wrong"
    }
    fn select_tool(&self, _: &str, _: &[String], c: &[ToolView]) -> Result<ToolRef, crate::agent::AgentError> {
        Ok(c.last().unwrap().tool.clone())
    }
    fn generate_params(&self, s: &str, ctx: &[String], t: &ToolView) -> Result<JsonObject, crate::agent::AgentError> {
        RuleAgent::new().generate_params(s, ctx, t)
    }
    fn process_response(&self, i: usize, s: &str, ctx: &[String], r: Option<&ToolResponse>) -> Result<String, crate::agent::AgentError> {
        RuleAgent::new().process_response(i, s, ctx, r)
    }
}

#[test]
fn wrong_selection_keeps_context_and_execution() {
    let u = build_synthetic_universe(&UniverseConfig::new(2, 3, 1, 3));
    let g = Gateway::simulated();
    let p = prepare(&u, &g, 0).unwrap();
    let q = &p.queries[0];
    let task = decompose_and_annotate(q, &p.annotated, &g);
    let views = tool_views(&p.annotated, Some(&p.store), DescriptionLevel::D2);
    let cands: Vec<ToolView> = q.candidate_tools.iter().map(|t| views[t].clone()).collect();
    let right = run_teacher_forced(&task, &cands, &views, &RuleAgent::new(), &p.sandbox, ExecScoring::Gt, 0);
    let wrong = run_teacher_forced(&task, &cands, &views, &WrongPicker, &p.sandbox, ExecScoring::Gt, 0);
    let first = wrong.iter().find(|s| s.needs_api && s.selected_tool != s.gt_tool).expect("a wrong pick");
    assert!(!first.outcome.selection_correct);
    assert!(first.outcome.execution_success);
    assert!(!first.outcome.subtask_success);
    let ctx = |r: &[StepRecord]| r.iter().map(|s| s.processed.clone()).collect::<Vec<_>>();
    assert_eq!(ctx(&right), ctx(&wrong));
    let sel = run_teacher_forced(&task, &cands, &views, &WrongPicker, &p.sandbox, ExecScoring::Selected, 0);
    assert!(sel.iter().filter(|s| s.needs_api).all(|s| s.executed_tool == s.selected_tool));
}

#[test]
fn bad_params_fail_execution() {
    struct Empty;
    impl Agent for Empty {
        fn name(&self) -> &str {
            "empty"
        }
        fn select_tool(&self, s: &str, ctx: &[String], c: &[ToolView]) -> Result<ToolRef, crate::agent::AgentError> {
            RuleAgent::new().select_tool(s, ctx, c)
        }
        fn generate_params(&self, _: &str, _: &[String], _: &ToolView) -> Result<JsonObject, crate::agent::AgentError> {
            Ok(JsonObject::new())
        }
        fn process_response(&self, i: usize, s: &str, ctx: &[String], r: Option<&ToolResponse>) -> Result<String, crate::agent::AgentError> {
            RuleAgent::new().process_response(i, s, ctx, r)
        }
    }
    let u = build_synthetic_universe(&UniverseConfig::new(2, 3, 1, 3));
    let g = Gateway::simulated();
    let p = prepare(&u, &g, 0).unwrap();
    let task = decompose_and_annotate(&p.queries[0], &p.annotated, &g);
    let views = tool_views(&p.annotated, Some(&p.store), DescriptionLevel::D2);
    let cands: Vec<ToolView> = p.queries[0].candidate_tools.iter().map(|t| views[t].clone()).collect();
    let recs = run_teacher_forced(&task, &cands, &views, &Empty, &p.sandbox, ExecScoring::Gt, 0);
    assert!(recs.iter().filter(|s| s.needs_api).all(|s| !s.outcome.execution_success));
    // the error message still flows forward
    let api = recs.iter().find(|s| s.needs_api).unwrap();
    assert!(api.processed.contains("Error"));
}

#[test]
fn scaling_properties() {
    let u = build_synthetic_universe(&UniverseConfig::new(40, 3, 2, 4));
    let c = &u.collection;
    let p = &c.providers()[0];
    let tools: Vec<ToolRef> = c.provider_tools(p).iter().map(|t| t.tool_ref()).collect();
    let q = Query {
        query_id: "q".into(),
        text: "x".into(),
        ground_truth_sequence: vec![tools[0].clone()],
        candidate_tools: tools.clone(),
        category: String::new(),
        split: Default::default(),
        extras: Default::default(),
    };
    let s = scale_candidates(&q, c, 20, 9);
    assert!(s.candidates.len() >= 20);
    assert_eq!(&s.candidates[..tools.len()], &tools[..]);
    assert!(!s.fallback);
    let cat = c.category_of_provider(p).unwrap();
    assert!(s.candidates.iter().all(|t| c.category_of_provider(&t.provider_id) == Some(cat)));
    assert_eq!(scale_candidates(&q, c, 20, 9), s);
    assert_eq!(scale_candidates(&q, c, 3, 9).candidates, tools);
    assert_eq!(scale_candidates(&q, c, 1, 9).candidates, tools);
    let big = scale_candidates(&q, c, 100, 9);
    assert!(big.candidates.len() >= 100);
    assert!(big.fallback);
}

proptest! {
    #[test]
    fn scale_superset_dedup_deterministic(target in 0usize..80, seed: u64, pi in 0usize..12) {
        let u = build_synthetic_universe(&UniverseConfig::new(12, 3, 3, 1));
        let c = &u.collection;
        let p = &c.providers()[pi];
        let tools: Vec<ToolRef> = c.provider_tools(p).iter().map(|t| t.tool_ref()).collect();
        let q = Query {
            query_id: format!("q{pi}"),
            text: "x".into(),
            ground_truth_sequence: vec![tools[0].clone()],
            candidate_tools: tools.clone(),
            category: String::new(),
            split: Default::default(),
            extras: Default::default(),
        };
        let s = scale_candidates(&q, c, target, seed);
        prop_assert!(tools.iter().all(|t| s.candidates.contains(t)));
        let set: std::collections::BTreeSet<_> = s.candidates.iter().collect();
        prop_assert_eq!(set.len(), s.candidates.len());
        prop_assert!(s.candidates.len() >= target.min(c.len()));
        if !s.fallback {
            let cat = c.category_of_provider(p);
            prop_assert!(s.candidates.iter().all(|t| c.category_of_provider(&t.provider_id) == cat));
        }
        prop_assert_eq!(scale_candidates(&q, c, target, seed), s);
    }
}

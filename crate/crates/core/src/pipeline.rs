//! In-memory chain of the data stages, for tests and quick runs.

use std::collections::{BTreeMap, BTreeSet};

use crate::agent::{tool_views, RuleAgent};
use crate::annotator::{annotate_collection, filter_seed_tools, AnnotatorError, DEFAULT_BUDGET, DEFAULT_MIN_APIS};
use crate::gateway::Gateway;
use crate::refinery::{extract_rules, refine_d1_all, refine_d2_all, RefineFailure, UsageRule, DEFAULT_RULE_CAP};
use crate::sandbox::{Sandbox, SandboxError, Universe};
use crate::synthesis::{collect_traces, summarize_per_tool, synthesize_queries, Rejection, PLAN_SIZE};
use crate::types::{DescriptionLevel, DescriptionStore, Query, ToolCollection, ToolRef, ToolTraceSummary, Trace};

pub const SUMMARY_EXEMPLARS: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Annotator(#[from] AnnotatorError),
}

pub struct Prepared {
    pub sandbox: Sandbox,
    pub annotated: ToolCollection,
    pub seed_providers: Vec<String>,
    pub queries: Vec<Query>,
    pub rejections: Vec<Rejection>,
    pub traces: Vec<Trace>,
    pub summaries: BTreeMap<ToolRef, ToolTraceSummary>,
    pub rules: Vec<UsageRule>,
    pub store: DescriptionStore,
    pub failures: Vec<RefineFailure>,
}

/// Annotates, filters, synthesizes one query per seed provider, traces the
/// rule agent on D0, and builds D1 and D2 for every tool.
pub fn prepare(universe: &Universe, gateway: &Gateway, seed: u64) -> Result<Prepared, PipelineError> {
    let sandbox = universe.sandbox()?;
    let (annotated, _) = annotate_collection(&universe.collection, gateway, &sandbox, DEFAULT_BUDGET, seed)?;
    let seed_providers = filter_seed_tools(&annotated, &BTreeSet::new(), DEFAULT_MIN_APIS)?;
    let (synth, rejections) = synthesize_queries(&seed_providers, &annotated, gateway, PLAN_SIZE);
    let queries: Vec<Query> = synth.into_iter().map(|s| s.query).collect();
    let views = tool_views(&annotated, None, DescriptionLevel::D0);
    let traces = collect_traces(&queries, &RuleAgent::new(), &views, &sandbox, seed);
    let summaries = summarize_per_tool(&traces, SUMMARY_EXEMPLARS);
    let mut store = DescriptionStore::from_collection(&annotated);
    let mut failures = refine_d1_all(&annotated, &mut store, gateway);
    let qmap: BTreeMap<String, Query> = queries.iter().map(|q| (q.query_id.clone(), q.clone())).collect();
    let rules = extract_rules(&traces, &qmap, &annotated, gateway);
    failures.extend(refine_d2_all(&annotated, &mut store, &rules, DEFAULT_RULE_CAP, gateway));
    Ok(Prepared {
        sandbox,
        annotated,
        seed_providers,
        queries,
        rejections,
        traces,
        summaries,
        rules,
        store,
        failures,
    })
}

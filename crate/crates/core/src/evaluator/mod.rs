//! Step-wise teacher-forced evaluation.
//!
//! Every needs-API subtask is scored twice and independently: did the agent
//! pick the ground-truth tool, and do its parameters for the ground-truth
//! tool execute. The ground-truth response always feeds the next subtask.

mod ingest;
mod scale;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::agent::{digest_line, tool_views, tools_info, Agent, ToolView};
use crate::gateway::{stage, Gateway};
use crate::io::{self, IoError};
use crate::metrics::{aggregate_report, EvaluationReport, MetricsError, OutcomeRecord};
use crate::prompts;
use crate::sandbox::ToolEnvironment;
use crate::types::{
    DescriptionLevel, DescriptionStore, JsonObject, Query, ResponseStatus, StepOutcome, ToolCollection, ToolRef,
    ToolResponse,
};

pub use ingest::{ingest_benchmark, BenchmarkFormat, IngestError, Ingested};
pub use scale::{scale_candidates, scale_queries, ScaledCandidates};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedSubtask {
    pub text: String,
    pub needs_api: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_api: Option<ToolRef>,
    pub confidence: f64,
    #[serde(default)]
    pub reasoning: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecomposedTask {
    pub query_id: String,
    pub subtasks: Vec<AnnotatedSubtask>,
}

impl DecomposedTask {
    pub fn gt_tools(&self) -> Vec<&ToolRef> {
        self.subtasks.iter().filter_map(|s| s.gt_api.as_ref()).collect()
    }

    pub fn is_well_formed(&self) -> bool {
        self.subtasks.iter().all(|s| s.needs_api == s.gt_api.is_some())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no queries to evaluate")]
    NoQueries,
    #[error("query {0} has no candidate tools")]
    NoCandidates(String),
    #[error("no tool has a {0} description")]
    LevelMissing(&'static str),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] IoError),
}

fn confidence_of(v: &Value) -> f64 {
    match v.get("confidence") {
        Some(Value::Number(n)) => n.as_f64().unwrap_or(0.0).clamp(0.0, 1.0),
        Some(Value::String(s)) => s.trim().parse::<f64>().unwrap_or(0.0).clamp(0.0, 1.0),
        _ => 0.0,
    }
}

/// When the decomposition itself fails: one needs-API subtask per
/// ground-truth step, each carrying the whole query.
fn fallback_task(query: &Query, reason: &str) -> DecomposedTask {
    DecomposedTask {
        query_id: query.query_id.clone(),
        subtasks: query
            .ground_truth_sequence
            .iter()
            .map(|t| AnnotatedSubtask {
                text: query.text.clone(),
                needs_api: true,
                gt_api: Some(t.clone()),
                confidence: 0.0,
                reasoning: format!("decomposition failed: {reason}"),
            })
            .collect(),
    }
}

/// One decomposition call, then one annotation call per subtask. The
/// annotator sees the query's ground-truth tools with their original
/// descriptions; a needs-API subtask it cannot map takes the next unused
/// ground-truth step.
pub fn decompose_and_annotate(query: &Query, collection: &ToolCollection, gateway: &Gateway) -> DecomposedTask {
    let mut gt_views: Vec<ToolView> = Vec::new();
    for t in &query.ground_truth_sequence {
        if !gt_views.iter().any(|v| &v.tool == t) {
            if let Some(ti) = collection.get(t) {
                gt_views.push(ToolView::original(ti));
            }
        }
    }
    let req = gateway.request(stage::DECOMPOSE, prompts::DECOMPOSE_SYSTEM, prompts::decompose_user(&query.text));
    let texts: Vec<String> = match gateway.complete_json(&req) {
        Ok(v) => match v.get("subtasks").and_then(Value::as_array) {
            Some(a) if !a.is_empty() => a
                .iter()
                .map(|s| s.as_str().map(str::to_string).unwrap_or_else(|| s.to_string()))
                .collect(),
            _ => return fallback_task(query, "no subtasks in reply"),
        },
        Err(e) => return fallback_task(query, &e.to_string()),
    };
    let info = tools_info(&gt_views);
    let mut remaining = query.ground_truth_sequence.iter();
    let mut previous: Vec<String> = Vec::new();
    let mut subtasks = Vec::with_capacity(texts.len());
    for text in texts {
        let req = gateway.request(
            stage::ANNOTATE_SUBTASK,
            prompts::SUBTASK_ANNOTATION_SYSTEM,
            prompts::subtask_annotation_user(&query.text, &text, &previous.join("; "), &info),
        );
        let (needs_api, api, confidence, reasoning) = match gateway.complete_json(&req) {
            Ok(a) => {
                let needs = match a.get("needs_api") {
                    Some(Value::Bool(b)) => *b,
                    Some(Value::String(s)) => s.eq_ignore_ascii_case("true"),
                    _ => true,
                };
                let api = a.get("api_name").and_then(Value::as_str).unwrap_or("").to_string();
                let reasoning = a.get("reasoning").and_then(Value::as_str).unwrap_or("").to_string();
                (needs, api, confidence_of(&a), reasoning)
            }
            Err(e) => (true, String::new(), 0.0, format!("annotation failed: {e}")),
        };
        previous.push(text.clone());
        let gt_api = if needs_api {
            let hinted = gt_views.iter().find(|v| v.tool.api_name == api).map(|v| v.tool.clone());
            let next = remaining.next().cloned();
            hinted.or(next)
        } else {
            None
        };
        subtasks.push(AnnotatedSubtask {
            text,
            needs_api: gt_api.is_some(),
            gt_api,
            confidence,
            reasoning,
        });
    }
    DecomposedTask {
        query_id: query.query_id.clone(),
        subtasks,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecScoring {
    /// Parameters are generated for and executed against the ground-truth tool.
    #[default]
    Gt,
    /// Execution is scored on the agent's own selection.
    Selected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub query_id: String,
    pub step: usize,
    pub subtask: String,
    pub needs_api: bool,
    /// Context entries visible to this step.
    pub context_in: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_tool: Option<ToolRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_tool: Option<ToolRef>,
    #[serde(default)]
    pub parameters: JsonObject,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_response: Option<ToolResponse>,
    /// Digest appended to the context for later steps.
    pub processed: String,
    pub outcome: StepOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub executed_tool: Option<ToolRef>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
}

impl StepRecord {
    pub fn outcome_record(&self) -> OutcomeRecord {
        OutcomeRecord {
            query_id: self.query_id.clone(),
            step: self.step,
            outcome: self.outcome,
            gt_tool: self.gt_tool.clone(),
            selected_tool: self.selected_tool.clone(),
            executed_tool: self.executed_tool.clone(),
        }
    }
}

fn invoke(env: &dyn ToolEnvironment, tool: &ToolRef, args: &JsonObject, seed: u64) -> ToolResponse {
    env.invoke(tool, args, seed)
        .unwrap_or_else(|e| ToolResponse::error(ResponseStatus::NotFound, format!("Error: {e}")))
}

/// Runs one decomposed query under teacher forcing.
pub fn run_teacher_forced(
    task: &DecomposedTask,
    candidates: &[ToolView],
    views: &BTreeMap<ToolRef, ToolView>,
    agent: &dyn Agent,
    env: &dyn ToolEnvironment,
    exec_scoring: ExecScoring,
    seed: u64,
) -> Vec<StepRecord> {
    let mut context: Vec<String> = Vec::new();
    let mut out = Vec::with_capacity(task.subtasks.len());
    for (i, sub) in task.subtasks.iter().enumerate() {
        let context_in = context.clone();
        let mut errors = Vec::new();
        let Some(gt) = sub.gt_api.as_ref().filter(|_| sub.needs_api) else {
            let processed = agent.process_response(i, &sub.text, &context, None).unwrap_or_else(|e| {
                errors.push(format!("process_response: {e}"));
                digest_line(i, &format!("Error: {e}"))
            });
            context.push(processed.clone());
            out.push(StepRecord {
                query_id: task.query_id.clone(),
                step: i,
                subtask: sub.text.clone(),
                needs_api: false,
                context_in,
                gt_tool: None,
                selected_tool: None,
                parameters: JsonObject::new(),
                gt_response: None,
                processed,
                outcome: StepOutcome::new(true, true),
                executed_tool: None,
                errors,
            });
            continue;
        };
        let selected = agent
            .select_tool(&sub.text, &context, candidates)
            .map_err(|e| errors.push(format!("select_tool: {e}")))
            .ok();
        let selection_correct = selected.as_ref() == Some(gt);
        let gen = |tool: &ToolRef, errors: &mut Vec<String>| -> Option<JsonObject> {
            let Some(view) = views.get(tool) else {
                errors.push(format!("generate_params: no interface for {tool}"));
                return None;
            };
            agent
                .generate_params(&sub.text, &context, view)
                .map_err(|e| errors.push(format!("generate_params: {e}")))
                .ok()
        };
        let gt_params = gen(gt, &mut errors);
        let gt_response = match &gt_params {
            Some(p) => invoke(env, gt, p, seed),
            None => ToolResponse::error(ResponseStatus::ServerError, "Error: no parameters were generated"),
        };
        let (execution_success, executed_tool, parameters) = match exec_scoring {
            ExecScoring::Gt => (gt_params.is_some() && gt_response.is_ok(), None, gt_params.clone().unwrap_or_default()),
            ExecScoring::Selected => match &selected {
                Some(s) if s == gt => (gt_params.is_some() && gt_response.is_ok(), Some(s.clone()), gt_params.clone().unwrap_or_default()),
                Some(s) => match gen(s, &mut errors) {
                    Some(p) => (invoke(env, s, &p, seed).is_ok(), Some(s.clone()), p),
                    None => (false, Some(s.clone()), JsonObject::new()),
                },
                None => (false, None, JsonObject::new()),
            },
        };
        let processed = agent
            .process_response(i, &sub.text, &context, Some(&gt_response))
            .unwrap_or_else(|e| {
                errors.push(format!("process_response: {e}"));
                digest_line(i, &gt_response.observation())
            });
        context.push(processed.clone());
        out.push(StepRecord {
            query_id: task.query_id.clone(),
            step: i,
            subtask: sub.text.clone(),
            needs_api: true,
            context_in,
            gt_tool: Some(gt.clone()),
            selected_tool: selected,
            parameters,
            gt_response: Some(gt_response),
            processed,
            outcome: StepOutcome::new(selection_correct, execution_success),
            executed_tool,
            errors,
        });
    }
    out
}

/// Decompositions keyed by `(query_id, seed)`, shared across levels.
#[derive(Debug, Default)]
pub struct DecompositionCache {
    inner: Mutex<BTreeMap<String, DecomposedTask>>,
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    task: DecomposedTask,
}

impl DecompositionCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn key(query_id: &str, seed: u64) -> String {
        format!("{query_id}@{seed}")
    }

    pub fn get_or_insert(&self, query: &Query, seed: u64, make: impl FnOnce() -> DecomposedTask) -> DecomposedTask {
        let key = Self::key(&query.query_id, seed);
        if let Some(t) = self.inner.lock().expect("cache lock").get(&key) {
            return t.clone();
        }
        let t = make();
        self.inner.lock().expect("cache lock").entry(key).or_insert(t).clone()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        let entries: Vec<CacheEntry> = if path.exists() { io::read_jsonl(path)? } else { Vec::new() };
        Ok(Self {
            inner: Mutex::new(entries.into_iter().map(|e| (e.key, e.task)).collect()),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        let entries: Vec<CacheEntry> = self
            .inner
            .lock()
            .expect("cache lock")
            .iter()
            .map(|(k, t)| CacheEntry {
                key: k.clone(),
                task: t.clone(),
            })
            .collect();
        io::write_jsonl(path, &entries)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub level: DescriptionLevel,
    pub seed: u64,
    #[serde(default)]
    pub exec_scoring: ExecScoring,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_n: Option<usize>,
    pub agent: String,
    #[serde(default)]
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub run_id: String,
    pub config: EvalConfig,
    /// Level actually shown to the agent per tool (after fallback).
    pub levels_used: BTreeMap<String, DescriptionLevel>,
    pub tasks: Vec<DecomposedTask>,
    pub steps: Vec<StepRecord>,
    pub report: EvaluationReport,
}

impl EvalRun {
    /// Writes `report.json`, `steps.jsonl`, `config.json` and `tasks.jsonl`.
    pub fn persist(&self, dir: &Path) -> Result<(), IoError> {
        io::write_json(&dir.join("report.json"), &self.report)?;
        io::write_jsonl(&dir.join("steps.jsonl"), &self.steps)?;
        io::write_jsonl(&dir.join("tasks.jsonl"), &self.tasks)?;
        let config = serde_json::json!({
            "run_id": self.run_id,
            "config": self.config,
            "levels_used": self.levels_used,
        });
        io::write_json(&dir.join("config.json"), &config)
    }

    pub fn load_report(dir: &Path) -> Result<EvaluationReport, IoError> {
        io::read_json(&dir.join("report.json"))
    }
}

/// Evaluates `queries` with the agent seeing `config.level` descriptions.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    queries: &[Query],
    collection: &ToolCollection,
    store: &DescriptionStore,
    agent: &dyn Agent,
    env: &dyn ToolEnvironment,
    gateway: &Gateway,
    cache: &DecompositionCache,
    config: &EvalConfig,
) -> Result<EvalRun, EvalError> {
    if queries.is_empty() {
        return Err(EvalError::NoQueries);
    }
    if let Some(q) = queries.iter().find(|q| q.candidate_tools.is_empty()) {
        return Err(EvalError::NoCandidates(q.query_id.clone()));
    }
    if config.level != DescriptionLevel::D0 && !store.has_level(config.level) {
        return Err(EvalError::LevelMissing(config.level.as_str()));
    }
    let views = tool_views(collection, Some(store), config.level);
    let levels_used: BTreeMap<String, DescriptionLevel> = views
        .keys()
        .map(|t| {
            let used = crate::agent::fallback_chain(config.level)
                .iter()
                .copied()
                .find(|l| store.get(t, *l).is_some())
                .unwrap_or(DescriptionLevel::D0);
            (t.to_string(), used)
        })
        .collect();
    let per_query: Vec<(DecomposedTask, Vec<StepRecord>)> = queries
        .par_iter()
        .map(|q| {
            let task = cache.get_or_insert(q, config.seed, || decompose_and_annotate(q, collection, gateway));
            let candidates: Vec<ToolView> = q.candidate_tools.iter().filter_map(|t| views.get(t).cloned()).collect();
            let steps = run_teacher_forced(&task, &candidates, &views, agent, env, config.exec_scoring, config.seed);
            (task, steps)
        })
        .collect();
    let (tasks, steps): (Vec<_>, Vec<Vec<StepRecord>>) = per_query.into_iter().unzip();
    let steps: Vec<StepRecord> = steps.into_iter().flatten().collect();
    let outcomes: Vec<OutcomeRecord> = steps.iter().map(StepRecord::outcome_record).collect();
    let report = aggregate_report(&outcomes)?;
    let run_id = format!(
        "{}-{}-s{}{}",
        config.level.as_str(),
        config.agent,
        config.seed,
        config.scale_n.map(|n| format!("-n{n}")).unwrap_or_default()
    );
    Ok(EvalRun {
        run_id,
        config: config.clone(),
        levels_used,
        tasks,
        steps,
        report,
    })
}

#[cfg(test)]
mod tests;

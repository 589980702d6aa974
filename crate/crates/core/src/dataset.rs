//! SFT example pairs, curriculum mixing, split assignment and training
//! artifact emission.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::gateway::ChatMessage;
use crate::io::{self, IoError};
use crate::prompts;
use crate::refinery::generator_prompt;
use crate::types::{
    DescriptionLevel, DescriptionStore, Query, Split, ToolCollection, ToolRef, ToolTraceSummary,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    TraceBased,
    TraceFree,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::TraceBased => "trace_based",
            Self::TraceFree => "trace_free",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftExample {
    pub example_id: String,
    pub tool: ToolRef,
    pub variant: Variant,
    /// System and user messages.
    pub prompt: Vec<ChatMessage>,
    /// JSON text `{"description": ...}`.
    pub completion: String,
    /// 1-based curriculum stage; 0 until mixed.
    #[serde(default)]
    pub stage: u32,
}

impl SftExample {
    pub fn user_prompt(&self) -> &str {
        self.prompt.last().map(|m| m.content.as_str()).unwrap_or("")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("curriculum plan has no stages")]
    EmptyPlan,
    #[error("stage {stage}: trace-free ratio {ratio} is outside [0, 1]")]
    RatioOutOfRange { stage: usize, ratio: f64 },
    #[error("trace-free ratio must not decrease across stages (stage {stage}: {prev} -> {next})")]
    NonMonotone { stage: usize, prev: f64, next: f64 },
    #[error("not enough examples: short by {trace_free} trace-free and {trace_based} trace-based")]
    Shortfall { trace_free: usize, trace_based: usize },
    #[error("cannot emit an empty training sequence")]
    EmptySequence,
    #[error("holdout fraction {0} is outside [0, 1)")]
    BadHoldout(f64),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Builds one trace-based and one trace-free example per tool that has a
/// D2 description. Tools without a summary get an empty one, so the pair
/// always differs by exactly the trace block.
pub fn build_examples(
    collection: &ToolCollection,
    store: &DescriptionStore,
    summaries: &BTreeMap<ToolRef, ToolTraceSummary>,
) -> Vec<SftExample> {
    let mut out = Vec::new();
    for tool in collection.iter() {
        let r = tool.tool_ref();
        let Some(d2) = store.get(&r, DescriptionLevel::D2) else {
            log::info!("{r}: no D2 description, skipping");
            continue;
        };
        let empty = ToolTraceSummary {
            tool: r.clone(),
            success_examples: Vec::new(),
            failure_examples: Vec::new(),
            counts: Default::default(),
        };
        let summary = summaries.get(&r).unwrap_or(&empty);
        let completion = json!({"description": d2.text}).to_string();
        for (variant, s) in [(Variant::TraceBased, Some(summary)), (Variant::TraceFree, None)] {
            out.push(SftExample {
                example_id: format!("{r}#{}", variant.as_str()),
                tool: r.clone(),
                variant,
                prompt: vec![
                    ChatMessage::system(prompts::DESCRIPTION_SYSTEM),
                    ChatMessage::user(generator_prompt(tool, s)),
                ],
                completion: completion.clone(),
                stage: 0,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumStage {
    pub trace_free_ratio: f64,
    pub example_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumPlan {
    pub stages: Vec<CurriculumStage>,
    pub seed: u64,
}

impl CurriculumPlan {
    /// Splits `total` evenly over the stages; earlier stages take the remainder.
    pub fn even(ratios: &[f64], total: usize, seed: u64) -> Self {
        let n = ratios.len().max(1);
        let stages = ratios
            .iter()
            .enumerate()
            .map(|(i, &r)| CurriculumStage {
                trace_free_ratio: r,
                example_count: total / n + usize::from(i < total % n),
            })
            .collect();
        Self { stages, seed }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.stages.is_empty() {
            return Err(DatasetError::EmptyPlan);
        }
        for (i, s) in self.stages.iter().enumerate() {
            if !(0.0..=1.0).contains(&s.trace_free_ratio) {
                return Err(DatasetError::RatioOutOfRange {
                    stage: i + 1,
                    ratio: s.trace_free_ratio,
                });
            }
            if i > 0 && s.trace_free_ratio < self.stages[i - 1].trace_free_ratio {
                return Err(DatasetError::NonMonotone {
                    stage: i + 1,
                    prev: self.stages[i - 1].trace_free_ratio,
                    next: s.trace_free_ratio,
                });
            }
        }
        Ok(())
    }

    /// `(trace_free, trace_based)` counts per stage.
    pub fn stage_counts(&self) -> Vec<(usize, usize)> {
        self.stages
            .iter()
            .map(|s| {
                let tf = round_half_up(s.trace_free_ratio * s.example_count as f64).min(s.example_count);
                (tf, s.example_count - tf)
            })
            .collect()
    }

    pub fn total(&self) -> usize {
        self.stages.iter().map(|s| s.example_count).sum()
    }
}

/// Round half up, tolerant of representation error (`0.1 * 25 = 2.5`).
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}

/// Orders examples into stage blocks. Each variant pool is shuffled under
/// the plan seed and drawn without replacement; each stage is shuffled.
pub fn mix_curriculum(examples: &[SftExample], plan: &CurriculumPlan) -> Result<Vec<SftExample>, DatasetError> {
    plan.validate()?;
    let counts = plan.stage_counts();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut pool = |v: Variant| {
        let mut p: Vec<&SftExample> = examples.iter().filter(|e| e.variant == v).collect();
        p.sort_by(|a, b| a.example_id.cmp(&b.example_id));
        p.shuffle(&mut rng);
        p
    };
    let free = pool(Variant::TraceFree);
    let based = pool(Variant::TraceBased);
    let need_free: usize = counts.iter().map(|c| c.0).sum();
    let need_based: usize = counts.iter().map(|c| c.1).sum();
    if need_free > free.len() || need_based > based.len() {
        return Err(DatasetError::Shortfall {
            trace_free: need_free.saturating_sub(free.len()),
            trace_based: need_based.saturating_sub(based.len()),
        });
    }
    let (mut fi, mut bi) = (0, 0);
    let mut out = Vec::with_capacity(plan.total());
    for (i, (tf, tb)) in counts.into_iter().enumerate() {
        let mut stage: Vec<SftExample> = free[fi..fi + tf].iter().chain(&based[bi..bi + tb]).map(|e| (*e).clone()).collect();
        fi += tf;
        bi += tb;
        stage.shuffle(&mut rng);
        for e in &mut stage {
            e.stage = i as u32 + 1;
        }
        out.extend(stage);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub tools: BTreeMap<ToolRef, Split>,
    pub queries: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn count(&self, split: Split) -> (usize, usize) {
        (
            self.queries.values().filter(|s| **s == split).count(),
            self.tools.values().filter(|s| **s == split).count(),
        )
    }

    /// Every query's tools share its split, and each tool and query has
    /// exactly one split.
    pub fn is_closed(&self, queries: &[Query]) -> bool {
        queries.iter().all(|q| {
            let Some(qs) = self.queries.get(&q.query_id) else { return false };
            q.tools().iter().all(|t| self.tools.get(t) == Some(qs))
        })
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Split A holds the test tools together with everything that shares a
/// query with them, transitively; the rest is Split B.
pub fn assign_splits(queries: &[Query], tools: &[ToolRef], test_tools: &BTreeSet<ToolRef>) -> SplitAssignment {
    let mut index: BTreeMap<&ToolRef, usize> = BTreeMap::new();
    for t in tools.iter().chain(queries.iter().flat_map(|q| q.ground_truth_sequence.iter().chain(&q.candidate_tools))) {
        let n = index.len();
        index.entry(t).or_insert(n);
    }
    let mut parent: Vec<usize> = (0..index.len()).collect();
    for q in queries {
        let ids: Vec<usize> = q.tools().iter().map(|t| index[t]).collect();
        for w in ids.windows(2) {
            let (a, b) = (find(&mut parent, w[0]), find(&mut parent, w[1]));
            parent[a] = b;
        }
    }
    let a_roots: BTreeSet<usize> = test_tools
        .iter()
        .filter_map(|t| index.get(t).copied())
        .map(|i| find(&mut parent, i))
        .collect();
    let mut out = SplitAssignment::default();
    let idx: Vec<(ToolRef, usize)> = index.iter().map(|(t, i)| ((*t).clone(), *i)).collect();
    for (t, i) in idx {
        let s = if a_roots.contains(&find(&mut parent, i)) { Split::A } else { Split::B };
        out.tools.insert(t, s);
    }
    for q in queries {
        let s = q
            .tools()
            .iter()
            .next()
            .map(|t| out.tools[t])
            .unwrap_or(Split::B);
        out.queries.insert(q.query_id.clone(), s);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub base_model: String,
    pub optimizer: String,
    pub learning_rate: f64,
    pub lr_scheduler: String,
    pub num_epochs: f64,
    pub lora_rank: u32,
    pub precision: String,
    pub max_length: u32,
    pub effective_batch_size: u32,
    pub deepspeed_stage: String,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            base_model: "Qwen3-4B-Instruct-2507".into(),
            optimizer: "adamw".into(),
            learning_rate: 5.0e-5,
            lr_scheduler: "cosine".into(),
            num_epochs: 2.0,
            lora_rank: 64,
            precision: "bf16".into(),
            max_length: 2048,
            effective_batch_size: 8,
            deepspeed_stage: "zero3".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ArtifactCounts {
    pub train: usize,
    pub valid: usize,
    pub valid_tools: usize,
    pub train_trace_free: usize,
    pub train_trace_based: usize,
    /// `(trace_free, trace_based)` in the training file, per stage.
    pub per_stage: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub hyperparameters: Hyperparameters,
    pub plan: CurriculumPlan,
    pub seed: u64,
    pub holdout_fraction: f64,
    pub counts: ArtifactCounts,
    pub valid_tools: Vec<ToolRef>,
}

#[derive(Serialize)]
struct ChatLine<'a> {
    example_id: &'a str,
    tool: &'a ToolRef,
    variant: Variant,
    stage: u32,
    messages: &'a [ChatMessage],
    assistant: &'a str,
}

fn chat_line(e: &SftExample) -> ChatLine<'_> {
    ChatLine {
        example_id: &e.example_id,
        tool: &e.tool,
        variant: e.variant,
        stage: e.stage,
        messages: &e.prompt,
        assistant: &e.completion,
    }
}

/// Writes `train.jsonl`, `valid.jsonl` and `manifest.json`. The holdout is
/// a seeded sample of tools; all of their examples go to `valid.jsonl`.
pub fn emit_training_artifacts(
    sequence: &[SftExample],
    plan: &CurriculumPlan,
    holdout_fraction: f64,
    out_dir: &Path,
) -> Result<TrainingManifest, DatasetError> {
    if sequence.is_empty() {
        return Err(DatasetError::EmptySequence);
    }
    if !(0.0..1.0).contains(&holdout_fraction) {
        return Err(DatasetError::BadHoldout(holdout_fraction));
    }
    let mut tools: Vec<ToolRef> = sequence.iter().map(|e| e.tool.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    tools.shuffle(&mut ChaCha8Rng::seed_from_u64(plan.seed ^ 0x5eed));
    tools.truncate(round_half_up(holdout_fraction * tools.len() as f64));
    tools.sort();
    let held: BTreeSet<&ToolRef> = tools.iter().collect();
    let (valid, train): (Vec<&SftExample>, Vec<&SftExample>) = sequence.iter().partition(|e| held.contains(&e.tool));
    let train_lines: Vec<ChatLine> = train.iter().map(|e| chat_line(e)).collect();
    let valid_lines: Vec<ChatLine> = valid.iter().map(|e| chat_line(e)).collect();
    io::write_jsonl(&out_dir.join("train.jsonl"), &train_lines)?;
    io::write_jsonl(&out_dir.join("valid.jsonl"), &valid_lines)?;
    let stages = plan.stages.len().max(sequence.iter().map(|e| e.stage as usize).max().unwrap_or(0));
    let mut per_stage = vec![(0, 0); stages];
    for e in &train {
        if let Some(slot) = (e.stage as usize).checked_sub(1).and_then(|i| per_stage.get_mut(i)) {
            match e.variant {
                Variant::TraceFree => slot.0 += 1,
                Variant::TraceBased => slot.1 += 1,
            }
        }
    }
    let manifest = TrainingManifest {
        hyperparameters: Hyperparameters::default(),
        plan: plan.clone(),
        seed: plan.seed,
        holdout_fraction,
        counts: ArtifactCounts {
            train: train.len(),
            valid: valid.len(),
            valid_tools: tools.len(),
            train_trace_free: train.iter().filter(|e| e.variant == Variant::TraceFree).count(),
            train_trace_based: train.iter().filter(|e| e.variant == Variant::TraceBased).count(),
            per_stage,
        },
        valid_tools: tools,
    };
    io::write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use toolforge_core::agent::{tool_views, Agent, LlmAgent, RuleAgent};
use toolforge_core::annotator::{annotate_collection, filter_seed_tools};
use toolforge_core::dataset::{build_examples, emit_training_artifacts, mix_curriculum, CurriculumPlan, SftExample, Variant};
use toolforge_core::evaluator::{
    evaluate, ingest_benchmark, scale_queries, BenchmarkFormat, DecompositionCache, EvalConfig, EvalRun, ExecScoring,
};
use toolforge_core::gateway::{
    ChatBackend, Gateway, GatewayConfig, HttpBackend, HttpBackendConfig, MockBackend, ScriptBook,
};
use toolforge_core::io::{read_json, read_jsonl, write_json, write_jsonl};
use toolforge_core::metrics::{with_comparison, EvaluationReport};
use toolforge_core::pipeline::SUMMARY_EXEMPLARS;
use toolforge_core::refinery::{
    extract_rules, generate_description, refine_d1_all, refine_d2_all, repair_schema, FailedCall,
};
use toolforge_core::sandbox::{
    build_synthetic_universe, corrupt_declared_schema, CorruptionSpec, HttpEnvironment, ToolEnvironment, Universe,
    UniverseConfig,
};
use toolforge_core::synthesis::{collect_traces, summarize_per_tool, synthesize_queries, PLAN_SIZE};
use toolforge_core::types::{
    DescriptionLevel, DescriptionStore, DescriptionVersion, Health, Query, ToolCollection, ToolRef, ToolTraceSummary,
    Trace,
};

use crate::config::{ConfigError, Mode, PipelineConfig, SIMULATED_BOOK};
use crate::record::{write_record, Recorder, RunRecord};

pub const CORRUPTION_KINDS: [&str; 3] = ["drop_required", "add_phantom", "flip_type"];

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "kebab-case")]
pub enum Command {
    /// Build the synthetic tool universe (tools plus behavior ground truth).
    Universe,
    /// Convert a benchmark file into tools.json and queries.jsonl.
    Ingest(IngestArgs),
    /// Probe every provider and label tool health; pick seed providers.
    Annotate,
    /// One dependency-aware query per seed provider.
    Synthesize,
    /// Run the agent on D0 descriptions and summarize calls per tool.
    Trace,
    /// Write D0 and D1 descriptions.
    #[command(name = "refine-d1")]
    RefineD1,
    /// Distill usage rules from failed traces and write D2.
    #[command(name = "refine-d2")]
    RefineD2,
    /// Add `generated` descriptions from the generator model.
    Generate,
    /// Fix declared schemas against the live tools.
    RepairSchema(RepairArgs),
    /// Curriculum-mixed training pairs plus manifest.
    BuildSft(SftArgs),
    /// Teacher-forced evaluation at one description level.
    Evaluate(EvalArgs),
    /// Print a run's rates and compare it with a baseline run.
    Report(ReportArgs),
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct IngestArgs {
    /// toolbench_json or restbench_json
    #[arg(long)]
    pub format: String,
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
pub struct RepairArgs {
    /// Inject one corruption of this kind per provider before repairing.
    #[arg(long, value_parser = CORRUPTION_KINDS)]
    pub corrupt: Option<String>,
    /// Only the first N providers (corruption mode).
    #[arg(long)]
    pub providers: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
pub struct SftArgs {
    #[arg(long, value_delimiter = ',')]
    pub ratios: Option<Vec<f64>>,
    #[arg(long)]
    pub total: Option<usize>,
    #[arg(long)]
    pub holdout: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    /// d0, d1, d2 or generated
    #[arg(long, default_value = "d0")]
    pub level: String,
    #[arg(long)]
    pub scale_n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// gt or selected
    #[arg(long)]
    pub exec_scoring: Option<String>,
    /// rule or llm
    #[arg(long)]
    pub agent: Option<String>,
}

impl EvalArgs {
    pub fn level(level: &str) -> Self {
        Self {
            level: level.into(),
            scale_n: None,
            seed: None,
            exec_scoring: None,
            agent: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ReportArgs {
    /// Run id under the runs directory, or a run directory.
    #[arg(long)]
    pub run: String,
    /// Baseline run to compare against.
    #[arg(long)]
    pub compare: Option<String>,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Universe => "universe",
            Command::Ingest(_) => "ingest",
            Command::Annotate => "annotate",
            Command::Synthesize => "synthesize",
            Command::Trace => "trace",
            Command::RefineD1 => "refine-d1",
            Command::RefineD2 => "refine-d2",
            Command::Generate => "generate",
            Command::RepairSchema(_) => "repair-schema",
            Command::BuildSft(_) => "build-sft",
            Command::Evaluate(_) => "evaluate",
            Command::Report(_) => "report",
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("missing {artifact} at {path}: run {producer} first")]
pub struct MissingArtifact {
    pub artifact: String,
    pub path: String,
    pub producer: &'static str,
}

pub fn build_gateway(config: &PipelineConfig) -> Result<Gateway, ConfigError> {
    let b = &config.backend;
    let gc = GatewayConfig {
        model_id: b.model_id.clone(),
        max_calls: config.budgets.max_calls,
        max_tokens: config.budgets.max_tokens,
        max_in_flight: config.budgets.workers,
        ..GatewayConfig::default()
    };
    let backend: Arc<dyn ChatBackend> = match b.mode {
        Mode::Mock => {
            let book = match b.scriptbook_path.as_deref() {
                Some(SIMULATED_BOOK) => ScriptBook::simulated(),
                Some(p) => {
                    let text = std::fs::read_to_string(p)
                        .map_err(|e| ConfigError::Invalid(format!("backend.scriptbook_path {p}: {e}")))?;
                    ScriptBook::from_json_str(&text)
                        .map_err(|e| ConfigError::Invalid(format!("backend.scriptbook_path {p}: {e}")))?
                }
                None => return Err(ConfigError::Invalid("backend.mode = \"mock\" requires backend.scriptbook_path".into())),
            };
            Arc::new(MockBackend::new(book))
        }
        Mode::Http => {
            let hc = HttpBackendConfig::from_env(b.base_url.as_deref())
                .ok_or_else(|| ConfigError::Invalid("backend.mode = \"http\" requires a base URL".into()))?;
            Arc::new(HttpBackend::new(hc).map_err(|e| ConfigError::Invalid(format!("http backend: {e}")))?)
        }
    };
    Ok(Gateway::new(backend, gc))
}

pub struct Ctx {
    pub config: PipelineConfig,
    pub gateway: Arc<Gateway>,
}

fn save_level(path: &Path, store: &DescriptionStore, level: DescriptionLevel) -> Result<()> {
    write_jsonl(path, store.iter().filter(|v| v.level == level))?;
    Ok(())
}

fn load_summaries(path: &Path) -> Result<BTreeMap<ToolRef, ToolTraceSummary>> {
    let list: Vec<ToolTraceSummary> = read_json(path)?;
    Ok(list.into_iter().map(|s| (s.tool.clone(), s)).collect())
}

fn producer_of(level: DescriptionLevel) -> &'static str {
    match level {
        DescriptionLevel::D0 | DescriptionLevel::D1 => "refine-d1",
        DescriptionLevel::D2 => "refine-d2",
        DescriptionLevel::Generated => "generate",
    }
}

fn parse_level(s: &str) -> Result<DescriptionLevel> {
    DescriptionLevel::parse(s).ok_or_else(|| anyhow!("unknown description level `{s}` (d0, d1, d2, generated)"))
}

fn parse_exec_scoring(s: &str) -> Result<ExecScoring> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
        .map_err(|_| anyhow!("unknown exec scoring `{s}` (gt, selected)"))
}

impl Ctx {
    pub fn new(config: PipelineConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let gateway = Arc::new(build_gateway(&config)?);
        Ok(Self { config, gateway })
    }

    pub fn workdir(&self) -> &Path {
        &self.config.paths.workdir
    }

    fn path(&self, p: &Path) -> PathBuf {
        self.config.paths.at(p)
    }

    /// Resolves an upstream artifact, recording it as an input.
    fn need(&self, rec: &mut Recorder, p: &Path, artifact: &str, producer: &'static str) -> Result<PathBuf> {
        let path = self.path(p);
        if !path.exists() {
            return Err(MissingArtifact {
                artifact: artifact.into(),
                path: path.display().to_string(),
                producer,
            }
            .into());
        }
        rec.input(&path)?;
        Ok(path)
    }

    fn environment(&self, rec: &mut Recorder) -> Result<Box<dyn ToolEnvironment>> {
        if let Some(url) = &self.config.sandbox.base_url {
            return Ok(Box::new(HttpEnvironment::new(url.clone())?));
        }
        let p = self.need(rec, &self.config.paths.universe, "synthetic universe", "universe")?;
        let universe: Universe = read_json(&p)?;
        Ok(Box::new(universe.sandbox()?))
    }

    fn agent(&self, name: &str) -> Result<Box<dyn Agent>> {
        match name {
            "rule" => Ok(Box::new(RuleAgent::new())),
            "llm" => Ok(Box::new(LlmAgent::new(self.gateway.clone()))),
            other => bail!("unknown agent `{other}` (rule, llm)"),
        }
    }

    fn annotated(&self, rec: &mut Recorder) -> Result<ToolCollection> {
        let p = self.need(rec, &self.config.paths.annotated, "annotated tool collection", "annotate")?;
        Ok(read_json(&p)?)
    }

    /// `descriptions/<level>.jsonl`; each level is written by exactly one stage.
    fn level_path(&self, level: DescriptionLevel) -> PathBuf {
        self.path(&self.config.paths.descriptions).join(format!("{}.jsonl", level.as_str()))
    }

    fn descriptions(&self, rec: &mut Recorder, levels: &[DescriptionLevel]) -> Result<DescriptionStore> {
        let mut store = DescriptionStore::new();
        for &l in levels {
            let p = self.level_path(l);
            if !p.exists() {
                return Err(MissingArtifact {
                    artifact: format!("{} descriptions", l.as_str()),
                    path: p.display().to_string(),
                    producer: producer_of(l),
                }
                .into());
            }
            rec.input(&p)?;
            for v in read_jsonl::<DescriptionVersion>(&p)? {
                store.insert(v);
            }
        }
        Ok(store)
    }

    /// Runs one stage and writes its run record.
    pub fn run(&self, command: &Command) -> Result<RunRecord> {
        let before = (self.gateway.calls_used(), self.gateway.tokens_used());
        let mut rec = Recorder::new(self.workdir(), command.name());
        std::fs::create_dir_all(self.workdir()).with_context(|| format!("creating {}", self.workdir().display()))?;
        match command {
            Command::Universe => self.universe(&mut rec)?,
            Command::Ingest(a) => self.ingest(&mut rec, a)?,
            Command::Annotate => self.annotate(&mut rec)?,
            Command::Synthesize => self.synthesize(&mut rec)?,
            Command::Trace => self.trace(&mut rec)?,
            Command::RefineD1 => self.refine_d1(&mut rec)?,
            Command::RefineD2 => self.refine_d2(&mut rec)?,
            Command::Generate => self.generate(&mut rec)?,
            Command::RepairSchema(a) => self.repair(&mut rec, a)?,
            Command::BuildSft(a) => self.build_sft(&mut rec, a)?,
            Command::Evaluate(a) => self.evaluate(&mut rec, a)?,
            Command::Report(a) => self.report(&mut rec, a)?,
        }
        let record = rec.finish(
            command,
            &self.config,
            self.gateway.calls_used() - before.0,
            self.gateway.tokens_used() - before.1,
        )?;
        write_record(&self.path(&self.config.paths.records), &record)?;
        Ok(record)
    }

    fn universe(&self, rec: &mut Recorder) -> Result<()> {
        let u = &self.config.universe;
        let seed = self.config.seeds.universe;
        rec.seed("universe", seed);
        let uc = UniverseConfig::new(u.providers, u.apis_per_provider, u.categories, seed)
            .with_broken(u.broken_fraction)
            .with_short(u.short_fraction);
        let universe = build_synthetic_universe(&uc);
        let up = self.path(&self.config.paths.universe);
        let tp = self.path(&self.config.paths.tools);
        write_json(&up, &universe)?;
        write_json(&tp, &universe.collection)?;
        rec.output(&up);
        rec.output(&tp);
        println!(
            "universe: {} providers, {} tools, {} broken providers",
            universe.collection.providers().len(),
            universe.collection.len(),
            universe.broken_providers().len()
        );
        Ok(())
    }

    fn ingest(&self, rec: &mut Recorder, a: &IngestArgs) -> Result<()> {
        let format: BenchmarkFormat = a.format.parse().map_err(|e: String| anyhow!(e))?;
        rec.input(&a.input)?;
        let ing = ingest_benchmark(format, &a.input)?;
        let tp = self.path(&self.config.paths.tools);
        let qp = self.path(&self.config.paths.queries);
        write_json(&tp, &ing.collection)?;
        write_jsonl(&qp, &ing.queries)?;
        rec.output(&tp);
        rec.output(&qp);
        println!("ingest: {} tools, {} queries", ing.collection.len(), ing.queries.len());
        Ok(())
    }

    fn annotate(&self, rec: &mut Recorder) -> Result<()> {
        let c = &self.config;
        let tp = self.need(rec, &c.paths.tools, "tool collection", "universe")?;
        let collection: ToolCollection = read_json(&tp)?;
        let env = self.environment(rec)?;
        rec.seed("annotate", c.seeds.annotate);
        let (annotated, sessions) = annotate_collection(
            &collection,
            &self.gateway,
            env.as_ref(),
            c.budgets.annotator_steps,
            c.seeds.annotate,
        )?;
        let blocklist: BTreeSet<String> = c.filter.blocklist.iter().cloned().collect();
        let seeds = filter_seed_tools(&annotated, &blocklist, c.filter.min_apis)?;
        let ap = self.path(&c.paths.annotated);
        let sp = self.path(&c.paths.annotations);
        let fp = self.path(&c.paths.seeds);
        write_json(&ap, &annotated)?;
        write_jsonl(&sp, &sessions)?;
        write_json(&fp, &seeds)?;
        rec.output(&ap);
        rec.output(&sp);
        rec.output(&fp);
        let bad = annotated.iter().filter(|t| t.health != Health::Good).count();
        println!(
            "annotate: {} providers, {} apis not good, {} seed providers kept",
            sessions.len(),
            bad,
            seeds.len()
        );
        Ok(())
    }

    fn synthesize(&self, rec: &mut Recorder) -> Result<()> {
        let c = &self.config;
        let annotated = self.annotated(rec)?;
        let fp = self.need(rec, &c.paths.seeds, "seed provider list", "annotate")?;
        let seeds: Vec<String> = read_json(&fp)?;
        let (synth, rejections) = synthesize_queries(&seeds, &annotated, &self.gateway, PLAN_SIZE);
        for r in &rejections {
            log::warn!("{}: {}", r.provider_id, r.reason);
        }
        if synth.is_empty() {
            bail!("no query survived validation ({} rejected)", rejections.len());
        }
        let queries: Vec<Query> = synth.into_iter().map(|s| s.query).collect();
        let qp = self.path(&c.paths.queries);
        let rp = self.path(&c.paths.rejections);
        write_jsonl(&qp, &queries)?;
        write_jsonl(&rp, &rejections)?;
        rec.output(&qp);
        rec.output(&rp);
        println!("synthesize: {} queries, {} rejected", queries.len(), rejections.len());
        Ok(())
    }

    fn queries(&self, rec: &mut Recorder) -> Result<Vec<Query>> {
        let p = self.need(rec, &self.config.paths.queries, "query set", "synthesize")?;
        Ok(read_jsonl(&p)?)
    }

    fn trace(&self, rec: &mut Recorder) -> Result<()> {
        let c = &self.config;
        let annotated = self.annotated(rec)?;
        let queries = self.queries(rec)?;
        let env = self.environment(rec)?;
        let agent = self.agent(&c.evaluation.agent)?;
        rec.seed("trace", c.seeds.trace);
        let views = tool_views(&annotated, None, DescriptionLevel::D0);
        let traces = collect_traces(&queries, agent.as_ref(), &views, env.as_ref(), c.seeds.trace);
        let summaries = summarize_per_tool(&traces, SUMMARY_EXEMPLARS);
        let tp = self.path(&c.paths.traces);
        let sp = self.path(&c.paths.summaries);
        write_jsonl(&tp, &traces)?;
        write_json(&sp, &summaries.values().collect::<Vec<_>>())?;
        rec.output(&tp);
        rec.output(&sp);
        let failed = traces.iter().filter(|t| Trace::derived_status(&t.steps) != toolforge_core::types::TerminalStatus::Success).count();
        println!("trace: {} traces, {} with failures, {} tools summarized", traces.len(), failed, summaries.len());
        Ok(())
    }

    fn refine_d1(&self, rec: &mut Recorder) -> Result<()> {
        let annotated = self.annotated(rec)?;
        let mut store = DescriptionStore::from_collection(&annotated);
        let failures = refine_d1_all(&annotated, &mut store, &self.gateway);
        for f in &failures {
            log::warn!("{}: {}", f.tool, f.error);
        }
        for l in [DescriptionLevel::D0, DescriptionLevel::D1] {
            let p = self.level_path(l);
            save_level(&p, &store, l)?;
            rec.output(&p);
        }
        println!("refine-d1: {} tools, {} failures", annotated.len(), failures.len());
        Ok(())
    }

    fn refine_d2(&self, rec: &mut Recorder) -> Result<()> {
        let c = &self.config;
        let annotated = self.annotated(rec)?;
        let mut store = self.descriptions(rec, &[DescriptionLevel::D0, DescriptionLevel::D1])?;
        let queries = self.queries(rec)?;
        let tp = self.need(rec, &c.paths.traces, "traces", "trace")?;
        let traces: Vec<Trace> = read_jsonl(&tp)?;
        let qmap: BTreeMap<String, Query> = queries.into_iter().map(|q| (q.query_id.clone(), q)).collect();
        let rules = extract_rules(&traces, &qmap, &annotated, &self.gateway);
        let failures = refine_d2_all(&annotated, &mut store, &rules, c.budgets.rule_cap, &self.gateway);
        for f in &failures {
            log::warn!("{}: {}", f.tool, f.error);
        }
        let rp = self.path(&c.paths.rules);
        write_jsonl(&rp, &rules)?;
        let dp = self.level_path(DescriptionLevel::D2);
        save_level(&dp, &store, DescriptionLevel::D2)?;
        rec.output(&rp);
        rec.output(&dp);
        println!("refine-d2: {} rules, {} failures", rules.len(), failures.len());
        Ok(())
    }

    fn generate(&self, rec: &mut Recorder) -> Result<()> {
        let annotated = self.annotated(rec)?;
        let mut store = DescriptionStore::new();
        let sp = self.need(rec, &self.config.paths.summaries, "trace summaries", "trace")?;
        let summaries = load_summaries(&sp)?;
        let results: Vec<_> = annotated
            .tools()
            .par_iter()
            .map(|t| (t.tool_ref(), generate_description(t, summaries.get(&t.tool_ref()), &self.gateway)))
            .collect();
        let mut failed = 0;
        for (r, res) in results {
            match res {
                Ok(v) => store.insert(v),
                Err(e) => {
                    failed += 1;
                    log::warn!("{r}: {e}");
                }
            }
        }
        let dp = self.level_path(DescriptionLevel::Generated);
        save_level(&dp, &store, DescriptionLevel::Generated)?;
        rec.output(&dp);
        println!("generate: {} tools, {failed} failures", annotated.len());
        Ok(())
    }

    fn repair(&self, rec: &mut Recorder, a: &RepairArgs) -> Result<()> {
        let c = &self.config;
        let seed = a.seed.unwrap_or(c.seeds.repair);
        rec.seed("repair", seed);
        let tp = self.need(rec, &c.paths.tools, "tool collection", "universe")?;
        let mut declared: ToolCollection = read_json(&tp)?;
        let env = self.environment(rec)?;
        let dir = self.path(&c.paths.repairs);
        let targets: Vec<String> = if let Some(kind) = &a.corrupt {
            let mut providers = declared.providers();
            if let Some(n) = a.providers {
                providers.truncate(n);
            }
            let spec = CorruptionSpec::sample(&declared, &providers, kind, seed);
            let (corrupted, diffs) = corrupt_declared_schema(&declared, &spec)?;
            declared = corrupted;
            let cp = dir.join("corruption.json");
            write_json(&cp, &diffs)?;
            rec.output(&cp);
            spec.edits.iter().map(|e| e.tool.provider_id.clone()).collect::<BTreeSet<_>>().into_iter().collect()
        } else {
            let annotated = self.annotated(rec)?;
            annotated
                .providers()
                .into_iter()
                .filter(|p| annotated.provider_tools(p).iter().any(|t| t.health != Health::Good))
                .collect()
        };
        let mut history: BTreeMap<String, Vec<FailedCall>> = BTreeMap::new();
        let trp = self.path(&c.paths.traces);
        if trp.exists() {
            rec.input(&trp)?;
            for t in read_jsonl::<Trace>(&trp)? {
                for s in t.steps.iter().filter(|s| s.needs_api && !s.output.is_ok()) {
                    if let Some(tool) = &s.selected_tool {
                        history.entry(tool.provider_id.clone()).or_default().push(FailedCall {
                            api_name: tool.api_name.clone(),
                            arguments: s.parameters.clone(),
                            error: s.output.observation(),
                        });
                    }
                }
            }
        }
        let sessions = targets
            .par_iter()
            .map(|p| {
                let h = history.get(p).map(Vec::as_slice).unwrap_or(&[]);
                repair_schema(p, &declared, env.as_ref(), &self.gateway, c.budgets.repair_steps, h, seed)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut repaired = declared.clone();
        for s in &sessions {
            s.apply(&mut repaired);
        }
        let sp = dir.join("sessions.jsonl");
        let rp = dir.join("tools.json");
        write_jsonl(&sp, &sessions)?;
        write_json(&rp, &repaired)?;
        rec.output(&sp);
        rec.output(&rp);
        let validated = sessions.iter().filter(|s| s.validated).count();
        println!("repair-schema: {validated}/{} providers validated", sessions.len());
        for s in sessions.iter().filter(|s| !s.validated) {
            log::warn!("{}: not validated after {} turns", s.provider_id, s.transcript.len());
        }
        Ok(())
    }

    fn build_sft(&self, rec: &mut Recorder, a: &SftArgs) -> Result<()> {
        let c = &self.config;
        let seed = a.seed.unwrap_or(c.seeds.build_sft);
        rec.seed("build_sft", seed);
        let annotated = self.annotated(rec)?;
        let store = self.descriptions(rec, &[DescriptionLevel::D2])?;
        let sp = self.need(rec, &c.paths.summaries, "trace summaries", "trace")?;
        let summaries = load_summaries(&sp)?;
        let examples = build_examples(&annotated, &store, &summaries);
        let ratios = a.ratios.clone().unwrap_or_else(|| c.curriculum.ratios.clone());
        let plan = match a.total.or(c.curriculum.total) {
            Some(total) => CurriculumPlan::even(&ratios, total, seed),
            None => largest_plan(&examples, &ratios, seed),
        };
        let sequence = mix_curriculum(&examples, &plan)?;
        let holdout = a.holdout.unwrap_or(c.curriculum.holdout_fraction);
        let dir = self.path(&c.paths.datasets);
        let manifest = emit_training_artifacts(&sequence, &plan, holdout, &dir)?;
        rec.output(&dir);
        println!(
            "build-sft: {} examples ({} train, {} valid), per-stage trace-free/trace-based {:?}",
            sequence.len(),
            manifest.counts.train,
            manifest.counts.valid,
            plan.stage_counts()
        );
        Ok(())
    }

    fn evaluate(&self, rec: &mut Recorder, a: &EvalArgs) -> Result<()> {
        let c = &self.config;
        let level = parse_level(&a.level)?;
        let seed = a.seed.unwrap_or(c.seeds.evaluate);
        let exec_scoring = match &a.exec_scoring {
            Some(s) => parse_exec_scoring(s)?,
            None => c.evaluation.exec_scoring,
        };
        let agent = self.agent(a.agent.as_deref().unwrap_or(&c.evaluation.agent))?;
        let annotated = self.annotated(rec)?;
        let mut queries = self.queries(rec)?;
        let mut levels = vec![DescriptionLevel::D0, DescriptionLevel::D1];
        if !levels.contains(&level) {
            levels.push(level);
        }
        let store = self.descriptions(rec, &levels)?;
        let env = self.environment(rec)?;
        rec.seed("evaluate", seed);
        if let Some(n) = a.scale_n {
            rec.seed("scale", c.seeds.scale);
            queries = scale_queries(&queries, &annotated, n, c.seeds.scale);
        }
        let cp = self.path(&c.paths.decompositions);
        let cache = if cp.exists() {
            rec.input(&cp)?;
            DecompositionCache::load(&cp)?
        } else {
            DecompositionCache::new()
        };
        let config = EvalConfig {
            level,
            seed,
            exec_scoring,
            scale_n: a.scale_n,
            agent: agent.name().to_string(),
            model_id: c.backend.model_id.clone(),
        };
        let run = evaluate(&queries, &annotated, &store, agent.as_ref(), env.as_ref(), &self.gateway, &cache, &config)?;
        let dir = self.path(&c.paths.runs).join(&run.run_id);
        run.persist(&dir)?;
        cache.save(&cp)?;
        rec.name = format!("evaluate-{}", run.run_id);
        rec.output(&dir);
        rec.output(&cp);
        println!("{}", summary_line(&run.run_id, &run.report));
        Ok(())
    }

    fn run_dir(&self, id: &str) -> PathBuf {
        let p = PathBuf::from(id);
        if p.join("report.json").exists() {
            p
        } else {
            self.path(&self.config.paths.runs).join(id)
        }
    }

    fn load_run(&self, rec: &mut Recorder, id: &str) -> Result<(PathBuf, EvaluationReport)> {
        let dir = self.run_dir(id);
        let rp = dir.join("report.json");
        if !rp.exists() {
            return Err(MissingArtifact {
                artifact: format!("run `{id}`"),
                path: rp.display().to_string(),
                producer: "evaluate",
            }
            .into());
        }
        rec.input(&rp)?;
        let report = EvalRun::load_report(&dir)?;
        Ok((dir, report))
    }

    fn report(&self, rec: &mut Recorder, a: &ReportArgs) -> Result<()> {
        let (_, report) = self.load_run(rec, &a.run)?;
        println!("{}", summary_line(&a.run, &report));
        let Some(base) = &a.compare else {
            return Ok(());
        };
        let (_, baseline) = self.load_run(rec, base)?;
        println!("{}", summary_line(base, &baseline));
        let (_, cmp) = with_comparison(report, &baseline)?;
        println!("metric & impr. (%) & degr. (%) & avg delta");
        println!("{}", cmp.f1.format_row("tool F1"));
        println!("{}", cmp.exec_success.format_row("exec success"));
        let out = self
            .path(&self.config.paths.runs)
            .join("comparisons")
            .join(format!("{}.vs.{}.json", sanitize(&a.run), sanitize(base)));
        write_json(&out, &cmp)?;
        rec.name = format!("report-{}", sanitize(&a.run));
        rec.output(&out);
        Ok(())
    }
}

fn sanitize(id: &str) -> String {
    Path::new(id)
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| id.to_string())
}

fn summary_line(id: &str, r: &EvaluationReport) -> String {
    format!(
        "{id}: SL {}% ({}) QL {}% ({})",
        r.sl_rate.percent(),
        r.sl_rate,
        r.ql_rate.percent(),
        r.ql_rate
    )
}

/// Largest even plan over `ratios` that the example pools can fill.
fn largest_plan(examples: &[SftExample], ratios: &[f64], seed: u64) -> CurriculumPlan {
    let free = examples.iter().filter(|e| e.variant == Variant::TraceFree).count();
    let based = examples.len() - free;
    let mut total = examples.len();
    loop {
        let plan = CurriculumPlan::even(ratios, total, seed);
        let (f, b) = plan
            .stage_counts()
            .into_iter()
            .fold((0, 0), |acc, (f, b)| (acc.0 + f, acc.1 + b));
        if total == 0 || (f <= free && b <= based) {
            return plan;
        }
        total -= 1;
    }
}

/// Full mock-friendly chain: every stage in order, then D2 against D0.
pub fn pipeline_commands(config: &PipelineConfig) -> Vec<Command> {
    let d0 = EvalArgs::level("d0");
    let d2 = EvalArgs::level("d2");
    let seed = config.seeds.evaluate;
    let agent = &config.evaluation.agent;
    let mut cmds = vec![
        Command::Universe,
        Command::Annotate,
        Command::Synthesize,
        Command::Trace,
        Command::RefineD1,
        Command::RefineD2,
        Command::BuildSft(SftArgs::default()),
        Command::Evaluate(d0),
        Command::Evaluate(d2),
        Command::Report(ReportArgs {
            run: format!("d2-{agent}-s{seed}"),
            compare: Some(format!("d0-{agent}-s{seed}")),
        }),
    ];
    for &n in &config.evaluation.scale_targets {
        cmds.push(Command::Evaluate(EvalArgs {
            scale_n: Some(n),
            ..EvalArgs::level("d2")
        }));
    }
    cmds
}

/// Reruns the recorded stage and lists outputs whose digest changed.
pub fn replay(record: &RunRecord) -> Result<Vec<String>> {
    let ctx = Ctx::new(record.config.clone())?;
    let changed = crate::record::digest_mismatches(ctx.workdir(), &record.inputs);
    if !changed.is_empty() {
        bail!("inputs changed since the record was written: {}", changed.join(", "));
    }
    let fresh = ctx.run(&record.command)?;
    Ok(record
        .outputs
        .iter()
        .filter(|(p, d)| fresh.outputs.get(*p) != Some(*d))
        .map(|(p, _)| p.clone())
        .collect())
}

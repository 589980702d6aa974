//! `toolforge`: drives the tool-description pipeline stage by stage.

mod config;
mod record;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Result;
use clap::{Parser, Subcommand};
use toolforge_core::io::read_json;
use toolforge_core::sandbox::{SandboxServer, Universe};

use config::{ConfigError, Mode, PipelineConfig};
use record::RunRecord;
use stages::{Command, Ctx};

#[derive(Parser)]
#[command(name = "toolforge", version, about = "Tool-interface synthesis, refinement and evaluation pipeline")]
struct Cli {
    /// TOML config file; built-in defaults (mock mode, simulated model) when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
    /// Script book JSON, or `simulated`.
    #[arg(long, global = true)]
    scriptbook: Option<String>,
    /// Model endpoint base URL (http mode).
    #[arg(long, global = true)]
    base_url: Option<String>,
    #[arg(long, global = true)]
    model_id: Option<String>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Send tool calls to a running sandbox server instead of the local universe.
    #[arg(long, global = true)]
    sandbox_url: Option<String>,
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Top,
}

#[derive(Subcommand)]
enum Top {
    #[command(flatten)]
    Stage(Command),
    /// Run universe through report, plus any configured scale targets.
    Pipeline,
    /// Write the effective configuration as TOML.
    Init {
        #[arg(default_value = "toolforge.toml")]
        path: PathBuf,
    },
    /// Rerun a stage from its run record and check the output digests.
    Replay { record: PathBuf },
    /// Serve the workdir's universe over HTTP until killed.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8765")]
        addr: String,
    },
}

impl Cli {
    fn load_config(&self) -> Result<PipelineConfig, ConfigError> {
        let mut c = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(w) = &self.workdir {
            c.paths.workdir = w.clone();
        }
        if let Some(m) = self.mode {
            c.backend.mode = m;
        }
        if let Some(s) = &self.scriptbook {
            c.backend.scriptbook_path = Some(s.clone());
        }
        if let Some(u) = &self.base_url {
            c.backend.base_url = Some(u.clone());
        }
        if let Some(m) = &self.model_id {
            c.backend.model_id = m.clone();
        }
        if let Some(n) = self.workers {
            c.budgets.workers = n;
        }
        if let Some(u) = &self.sandbox_url {
            c.sandbox.base_url = Some(u.clone());
        }
        c.validate()?;
        Ok(c)
    }
}

fn report_record(r: &RunRecord) {
    log::info!("{}: {} outputs, {} model calls", r.name, r.outputs.len(), r.model_calls);
}

fn run(cli: Cli) -> Result<ExitCode> {
    let config = cli.load_config()?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(config.budgets.workers)
        .build_global()
        .ok();
    match cli.command {
        Top::Init { path } => {
            std::fs::write(&path, config.canonical())?;
            println!("wrote {}", path.display());
        }
        Top::Stage(cmd) => {
            let ctx = Ctx::new(config)?;
            report_record(&ctx.run(&cmd)?);
        }
        Top::Pipeline => {
            let ctx = Ctx::new(config)?;
            for cmd in stages::pipeline_commands(&ctx.config) {
                report_record(&ctx.run(&cmd)?);
            }
        }
        Top::Replay { record } => {
            let rec = RunRecord::load(&record)?;
            let changed = stages::replay(&rec)?;
            if !changed.is_empty() {
                eprintln!("replay of {} changed: {}", rec.name, changed.join(", "));
                return Ok(ExitCode::from(1));
            }
            println!("replay {}: {} outputs identical", rec.name, rec.outputs.len());
        }
        Top::Serve { addr } => {
            let path = config.paths.at(&config.paths.universe);
            if !path.exists() {
                anyhow::bail!("missing universe at {}: run universe first", path.display());
            }
            let universe: Universe = read_json(&path)?;
            let server = SandboxServer::start(Arc::new(universe.sandbox()?), &addr)?;
            println!("sandbox listening on {}", server.base_url());
            loop {
                std::thread::park();
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) if e.downcast_ref::<ConfigError>().is_some() => {
            eprintln!("config error: {e:#}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

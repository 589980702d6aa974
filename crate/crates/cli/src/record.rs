use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use toolforge_core::io::{digest_path, read_json, sha256_hex, write_json};

use crate::config::PipelineConfig;
use crate::stages::Command;

/// Everything needed to rerun a stage and check that it reproduced its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub command: Command,
    pub config_hash: String,
    pub config: PipelineConfig,
    pub seeds: BTreeMap<String, u64>,
    /// Workdir-relative path to sha256, taken before the stage ran.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub model_calls: u64,
    pub model_tokens: u64,
}

impl RunRecord {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path).with_context(|| format!("reading run record {}", path.display()))
    }
}

pub fn config_hash(config: &PipelineConfig) -> String {
    sha256_hex(config.canonical().as_bytes())
}

pub struct Recorder {
    workdir: PathBuf,
    pub name: String,
    seeds: BTreeMap<String, u64>,
    inputs: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
}

impl Recorder {
    pub fn new(workdir: &Path, name: &str) -> Self {
        Self {
            workdir: workdir.to_path_buf(),
            name: name.to_string(),
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.workdir).unwrap_or(p).display().to_string()
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.seeds.insert(name.to_string(), value);
    }

    /// Digests `path` now, so later overwrites by the same stage don't leak in.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        let d = digest_path(path)?;
        self.inputs.insert(self.rel(path), d);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn finish(self, command: &Command, config: &PipelineConfig, calls: u64, tokens: u64) -> Result<RunRecord> {
        let mut outputs = BTreeMap::new();
        for p in &self.outputs {
            outputs.insert(self.rel(p), digest_path(p)?);
        }
        Ok(RunRecord {
            name: self.name,
            command: command.clone(),
            config_hash: config_hash(config),
            config: config.clone(),
            seeds: self.seeds,
            inputs: self.inputs,
            outputs,
            model_calls: calls,
            model_tokens: tokens,
        })
    }
}

pub fn write_record(dir: &Path, record: &RunRecord) -> Result<PathBuf> {
    let path = dir.join(format!("{}.json", record.name));
    write_json(&path, record)?;
    Ok(path)
}

/// Paths whose current digest differs from the recorded one.
pub fn digest_mismatches(workdir: &Path, digests: &BTreeMap<String, String>) -> Vec<String> {
    digests
        .iter()
        .filter(|(p, d)| digest_path(&workdir.join(p)).ok().as_ref() != Some(*d))
        .map(|(p, _)| p.clone())
        .collect()
}

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toolforge_core::gateway::{API_KEY_ENV, BASE_URL_ENV};

/// Reserved `scriptbook_path` value selecting the built-in simulated model.
pub const SIMULATED_BOOK: &str = "simulated";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub mode: Mode,
    #[serde(default)]
    pub base_url: Option<String>,
    pub model_id: String,
    #[serde(default)]
    pub scriptbook_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub universe: u64,
    pub annotate: u64,
    pub trace: u64,
    pub repair: u64,
    pub build_sft: u64,
    pub evaluate: u64,
    pub scale: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            universe: 7,
            annotate: 0,
            trace: 0,
            repair: 0,
            build_sft: 0,
            evaluate: 0,
            scale: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Budgets {
    pub annotator_steps: usize,
    pub repair_steps: usize,
    pub max_calls: Option<u64>,
    pub max_tokens: Option<u64>,
    pub workers: usize,
    pub rule_cap: usize,
}

impl Default for Budgets {
    fn default() -> Self {
        Self {
            annotator_steps: 40,
            repair_steps: 40,
            max_calls: None,
            max_tokens: None,
            workers: 8,
            rule_cap: 5,
        }
    }
}

/// Artifact locations; relative paths resolve against `workdir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub workdir: PathBuf,
    pub universe: PathBuf,
    pub tools: PathBuf,
    pub annotated: PathBuf,
    pub annotations: PathBuf,
    pub seeds: PathBuf,
    pub queries: PathBuf,
    pub rejections: PathBuf,
    pub traces: PathBuf,
    pub summaries: PathBuf,
    pub rules: PathBuf,
    pub descriptions: PathBuf,
    pub repairs: PathBuf,
    pub datasets: PathBuf,
    pub runs: PathBuf,
    pub records: PathBuf,
    pub decompositions: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            workdir: "toolforge-work".into(),
            universe: "universe.json".into(),
            tools: "tools.json".into(),
            annotated: "annotated.json".into(),
            annotations: "annotations.jsonl".into(),
            seeds: "seed_providers.json".into(),
            queries: "queries.jsonl".into(),
            rejections: "rejections.jsonl".into(),
            traces: "traces.jsonl".into(),
            summaries: "summaries.json".into(),
            rules: "rules.jsonl".into(),
            descriptions: "descriptions".into(),
            repairs: "repairs".into(),
            datasets: "sft".into(),
            runs: "runs".into(),
            records: "run-records".into(),
            decompositions: "decompositions.jsonl".into(),
        }
    }
}

impl Paths {
    pub fn at(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.workdir.join(p)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UniverseSection {
    pub providers: usize,
    pub apis_per_provider: usize,
    pub categories: usize,
    pub broken_fraction: f64,
    pub short_fraction: f64,
}

impl Default for UniverseSection {
    fn default() -> Self {
        Self {
            providers: 6,
            apis_per_provider: 3,
            categories: 3,
            broken_fraction: 0.0,
            short_fraction: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Curriculum {
    pub ratios: Vec<f64>,
    /// Total examples; all available when unset.
    pub total: Option<usize>,
    pub holdout_fraction: f64,
}

impl Default for Curriculum {
    fn default() -> Self {
        Self {
            ratios: vec![0.1, 0.9],
            total: None,
            holdout_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Evaluation {
    pub agent: String,
    pub exec_scoring: toolforge_core::evaluator::ExecScoring,
    pub scale_targets: Vec<usize>,
}

impl Default for Evaluation {
    fn default() -> Self {
        Self {
            agent: "rule".into(),
            exec_scoring: Default::default(),
            scale_targets: Vec::new(),
        }
    }
}

/// Seed-provider filter applied after annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Filter {
    pub min_apis: usize,
    pub blocklist: Vec<String>,
}

impl Default for Filter {
    fn default() -> Self {
        Self {
            min_apis: toolforge_core::annotator::DEFAULT_MIN_APIS,
            blocklist: Vec::new(),
        }
    }
}

/// Where tool calls go: the synthetic universe in-process, or a sandbox server.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SandboxSection {
    pub base_url: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub backend: BackendConfig,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub budgets: Budgets,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub universe: UniverseSection,
    #[serde(default)]
    pub filter: Filter,
    #[serde(default)]
    pub curriculum: Curriculum,
    #[serde(default)]
    pub evaluation: Evaluation,
    #[serde(default)]
    pub sandbox: SandboxSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            backend: BackendConfig {
                mode: Mode::Mock,
                base_url: None,
                model_id: "simulated".into(),
                scriptbook_path: Some(SIMULATED_BOOK.into()),
            },
            seeds: Seeds::default(),
            budgets: Budgets::default(),
            paths: Paths::default(),
            universe: UniverseSection::default(),
            filter: Filter::default(),
            curriculum: Curriculum::default(),
            evaluation: Evaluation::default(),
            sandbox: SandboxSection::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing {path}")]
    Parse {
        path: String,
        #[source]
        source: toml::de::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        match self.backend.mode {
            Mode::Mock if self.backend.scriptbook_path.is_none() => {
                return Err(ConfigError::Invalid("backend.mode = \"mock\" requires backend.scriptbook_path".into()))
            }
            Mode::Http => {
                if self.backend.base_url.is_none() && std::env::var(BASE_URL_ENV).is_err() {
                    return Err(ConfigError::Invalid(format!(
                        "backend.mode = \"http\" requires backend.base_url or {BASE_URL_ENV}"
                    )));
                }
                if std::env::var(API_KEY_ENV).is_err() {
                    return Err(ConfigError::Invalid(format!("backend.mode = \"http\" requires {API_KEY_ENV}")));
                }
            }
            Mode::Mock => {}
        }
        let r = &self.curriculum.ratios;
        if r.is_empty() || r.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(ConfigError::Invalid("curriculum.ratios must be non-empty fractions in [0, 1]".into()));
        }
        if self.budgets.workers == 0 {
            return Err(ConfigError::Invalid("budgets.workers must be at least 1".into()));
        }
        Ok(())
    }

    /// Canonical TOML rendering, hashed into run records.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

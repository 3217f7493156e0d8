//! Run configuration (TOML), validated up front.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Language, Split};
use crate::gateway::{resolve, GatewayConfig};
use crate::generator::PromptKind;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Remote,
    Retrieval,
    /// Gold pattern of each instance (oracle guidance).
    Mock,
}

impl std::str::FromStr for Backend {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "remote" => Ok(Backend::Remote),
            "retrieval" => Ok(Backend::Retrieval),
            "mock" => Ok(Backend::Mock),
            other => Err(format!("unknown backend {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub path: String,
    pub language: Option<Language>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Gateways {
    pub instruct: Option<GatewayConfig>,
    pub complete: Option<GatewayConfig>,
    pub seq2seq: Option<GatewayConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionSettings {
    pub max_attempts: usize,
    pub temperature: f64,
    pub max_tokens: u32,
    pub parallelism: usize,
}

impl Default for ExtractionSettings {
    fn default() -> Self {
        ExtractionSettings { max_attempts: 3, temperature: 0.0, max_tokens: 256, parallelism: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatcherSettings {
    pub backend: Backend,
    pub k: usize,
    pub beam_width: usize,
    pub max_tokens: u32,
}

impl Default for MatcherSettings {
    fn default() -> Self {
        MatcherSettings { backend: Backend::Retrieval, k: 10, beam_width: 10, max_tokens: 512 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationSettings {
    pub mode: PromptKind,
    /// Samples per guidance (guided) or per temperature (other modes).
    pub samples: usize,
    pub temperature: f64,
    pub temperature_schedule: Option<Vec<f64>>,
    pub max_tokens: u32,
    pub exemplar_budget_chars: usize,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        GenerationSettings {
            mode: PromptKind::Guided,
            samples: 1,
            temperature: 1.0,
            temperature_schedule: None,
            max_tokens: 1024,
            exemplar_budget_chars: 16_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct EvaluationSettings {
    /// Candidates considered per pair; all when unset.
    pub k: Option<usize>,
    pub curve: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    pub datasets: Vec<DatasetSpec>,
    /// Split that matching, generation and evaluation run on.
    #[serde(default = "default_split")]
    pub target_split: Split,
    /// Keep pairs that fail validation in downstream stages.
    #[serde(default)]
    pub include_invalid: bool,
    #[serde(default)]
    pub gateways: Gateways,
    #[serde(default)]
    pub extraction: ExtractionSettings,
    #[serde(default)]
    pub matcher: MatcherSettings,
    #[serde(default)]
    pub generation: GenerationSettings,
    #[serde(default)]
    pub evaluation: EvaluationSettings,
}

fn default_split() -> Split {
    Split::Test
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub backend: Option<Backend>,
    pub mode: Option<PromptKind>,
    pub k: Option<usize>,
    pub samples: Option<usize>,
}

/// A validated config plus the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(backend) = o.backend {
            self.matcher.backend = backend;
        }
        if let Some(mode) = o.mode {
            self.generation.mode = mode;
        }
        if let Some(k) = o.k {
            self.matcher.k = k;
            self.matcher.beam_width = self.matcher.beam_width.max(k);
        }
        if let Some(samples) = o.samples {
            self.generation.samples = samples;
        }
    }

    /// Checks value ranges and that referenced input files exist.
    pub fn validate(&self, base_dir: &Path) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.datasets.is_empty() {
            return invalid("no datasets configured".into());
        }
        for d in &self.datasets {
            if !resolve(base_dir, &d.path).is_file() {
                return invalid(format!("dataset {} does not exist", d.path));
            }
        }
        for (name, gw) in [
            ("instruct", &self.gateways.instruct),
            ("complete", &self.gateways.complete),
            ("seq2seq", &self.gateways.seq2seq),
        ] {
            if let Some(gw) = gw {
                gw.validate().map_err(|e| ConfigError::Invalid(format!("gateways.{name}: {e}")))?;
                if let Some(fixture) = gw.mock_fixture() {
                    if !resolve(base_dir, fixture).is_file() {
                        return invalid(format!("gateways.{name}: fixture {fixture} does not exist"));
                    }
                }
            }
        }
        if self.extraction.max_attempts < 1 {
            return invalid("extraction.max_attempts must be >= 1".into());
        }
        if self.extraction.parallelism < 1 {
            return invalid("extraction.parallelism must be >= 1".into());
        }
        if self.matcher.k < 1 || self.matcher.k > self.matcher.beam_width {
            return invalid(format!(
                "matcher: need 1 <= k <= beam_width (k = {}, beam_width = {})",
                self.matcher.k, self.matcher.beam_width
            ));
        }
        if self.generation.samples < 1 {
            return invalid("generation.samples must be >= 1".into());
        }
        if self.generation.temperature_schedule.as_ref().is_some_and(Vec::is_empty) {
            return invalid("generation.temperature_schedule is empty".into());
        }
        if self.evaluation.k == Some(0) || self.evaluation.curve.contains(&0) {
            return invalid("evaluation k values must be >= 1".into());
        }
        Ok(())
    }

    /// SHA-256 over the effective config, excluding the output directory.
    pub fn hash(&self) -> String {
        let mut normalized = self.clone();
        normalized.out_dir = String::new();
        let json = serde_json::to_vec(&normalized).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

impl LoadedConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        let mut config = RunConfig::from_toml(&text)?;
        config.apply(overrides);
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        config.validate(&base_dir)?;
        let out_dir = match &overrides.out {
            Some(out) => out.clone(),
            None => base_dir.join(&config.out_dir),
        };
        Ok(LoadedConfig { config, base_dir, out_dir })
    }
}

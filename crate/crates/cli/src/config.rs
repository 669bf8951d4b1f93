use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _};
use serde::{Deserialize, Serialize};

use dgreason_core::backend::WireConfig;
use dgreason_core::corpus::PromptTemplates;
use dgreason_core::genpipe::GenConfig;
use dgreason_core::metrics::{DEFAULT_BINS, DEFAULT_MIN_OCCURRENCES};
use dgreason_core::synth::{SynthConfig, TeacherConfig};
use dgreason_core::train::{StatsSource, TrainConfig};

use crate::cmd::UsageError;

/// Effective configuration: defaults, then the file, then flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Base seed for chain construction.
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub templates: PromptTemplates,
    pub generation: GenerationConfig,
    pub teacher: TeacherConfig,
    pub wire: WireConfig,
    pub train: TrainConfig,
    pub analysis: AnalysisConfig,
    pub synth: SynthConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub root: Option<PathBuf>,
    pub target_domain: Option<String>,
    /// Chain records used by `train`.
    pub chains: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub candidates: usize,
    pub temperature: f64,
    pub max_tokens: usize,
    pub retain_all: bool,
    pub retry_sweeps: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        let g = GenConfig::default();
        Self {
            candidates: g.candidates,
            temperature: g.temperature,
            max_tokens: g.max_tokens,
            retain_all: g.retain_all,
            retry_sweeps: g.retry_sweeps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub bins: usize,
    pub top_k: usize,
    pub min_occurrences: usize,
    /// Where `train` reads per-token statistics from.
    pub stats_source: StatsSource,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            bins: DEFAULT_BINS,
            top_k: 15,
            min_occurrences: DEFAULT_MIN_OCCURRENCES,
            stats_source: StatsSource::TeacherForced,
        }
    }
}

const SECRET_KEYS: [&str; 9] = [
    "api_key",
    "apikey",
    "key",
    "token",
    "secret",
    "password",
    "authorization",
    "auth_token",
    "access_token",
];

fn find_secret(value: &toml::Value, path: &str) -> Option<String> {
    let toml::Value::Table(table) = value else {
        return None;
    };
    for (k, v) in table {
        let here = if path.is_empty() {
            k.clone()
        } else {
            format!("{path}.{k}")
        };
        if SECRET_KEYS.contains(&k.to_ascii_lowercase().as_str()) {
            return Some(here);
        }
        if let Some(found) = find_secret(v, &here) {
            return Some(found);
        }
    }
    None
}

impl Config {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let raw: toml::Value = toml::from_str(text)?;
        if let Some(field) = find_secret(&raw, "") {
            bail!(UsageError(format!(
                "{field}: credentials are read from the {} environment variable, not from configuration",
                dgreason_core::backend::API_KEY_ENV
            )));
        }
        Ok(raw.try_into()?)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seeds = vec![seed];
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            candidates: self.generation.candidates,
            temperature: self.generation.temperature,
            max_tokens: self.generation.max_tokens,
            seed: self.seed,
            retain_all: self.generation.retain_all,
            retry_sweeps: self.generation.retry_sweeps,
            templates: self.templates.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

//! The TOML run configuration: every knob a pipeline run depends on.

use std::path::Path;

use serde::{Deserialize, Serialize};
use vuldetect_core::codeprep::{PrepOptions, DEFAULT_CONTEXT};
use vuldetect_core::data::{SplitSpec, Unit};
use vuldetect_core::distill::{DistillConfig, TrainConfig};
use vuldetect_core::models::ModelConfig;

use crate::error::{Error, Result};
use crate::io::{read_text, write_text};

pub const SEED_ENV: &str = "VULDETECT_SEED";

fn default_max_size() -> usize {
    10_000
}

fn default_min_freq() -> usize {
    1
}

fn default_context() -> usize {
    DEFAULT_CONTEXT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabSettings {
    #[serde(default = "default_max_size")]
    pub max_size: usize,
    #[serde(default = "default_min_freq")]
    pub min_freq: usize,
    /// Use this vocabulary file instead of building one from the train split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

impl Default for VocabSettings {
    fn default() -> Self {
        VocabSettings {
            max_size: default_max_size(),
            min_freq: default_min_freq(),
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Subcommand that produced this record.
    #[serde(default)]
    pub command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_override: Option<u64>,
    #[serde(default)]
    pub unit: Unit,
    #[serde(default = "default_context")]
    pub context: usize,
    /// Oversample the minority class of the train split.
    #[serde(default)]
    pub balance: bool,
    #[serde(default)]
    pub prep: PrepOptions,
    #[serde(default)]
    pub vocab: VocabSettings,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distill: Option<DistillConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: String::new(),
            data: None,
            checkpoint: None,
            seed_override: None,
            unit: Unit::Function,
            context: DEFAULT_CONTEXT,
            balance: false,
            prep: PrepOptions::default(),
            vocab: VocabSettings::default(),
            split: SplitSpec::default(),
            model: None,
            train: None,
            distill: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read_text(path)?).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_toml()?)
    }

    /// Replaces every seed (model init, split, training) with `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed_override = Some(seed);
        self.split.seed = seed;
        if let Some(m) = self.model.as_mut() {
            m.set_seed(seed);
        }
        if let Some(t) = self.train.as_mut() {
            t.seed = seed;
        }
        if let Some(d) = self.distill.as_mut() {
            d.seed = seed;
        }
    }

    pub fn model(&self) -> Result<&ModelConfig> {
        self.model
            .as_ref()
            .ok_or_else(|| Error::Config("missing [model] section".into()))
    }
}

/// Seed from the environment, if set.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Usage(format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::Usage(format!("{SEED_ENV}: {e}"))),
    }
}

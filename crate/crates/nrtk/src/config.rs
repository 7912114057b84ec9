//! The desk configuration: one JSON file holding every section the
//! subcommands read. Missing fields take their defaults; unknown fields are
//! rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use nrtk_core::preprocess::PreprocessConfig;
use nrtk_core::synth::SynthConfig;
use nrtk_core::{ModelConfig, TrainConfig};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeskConfig {
    pub synth: SynthConfig,
    pub preprocess: PreprocessConfig,
    /// Upper bound on segments read into a training corpus.
    pub max_segments: usize,
    pub model: ModelConfig,
    pub tokenizer: TrainConfig,
    pub pretrain: TrainConfig,
    /// Draws per score vector in `mask-report`.
    pub mask_draws: usize,
}

impl Default for DeskConfig {
    fn default() -> Self {
        let schedule = TrainConfig { epochs: 125, warmup_epochs: 5, ..TrainConfig::default() };
        Self {
            synth: SynthConfig { channels: 4, minutes: 9.0, ..SynthConfig::default() },
            preprocess: PreprocessConfig { window_s: 8.0, trim_s: 0.0, ..PreprocessConfig::default() },
            max_segments: 64,
            model: ModelConfig::default(),
            tokenizer: schedule.clone(),
            pretrain: TrainConfig { lr: 2e-3, ..schedule },
            mask_draws: 1000,
        }
    }
}

impl DeskConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::MalformedConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::MalformedConfig(format!("{}: {e}", p.display())))?;
                Self::parse(&text)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: nrtk_core::Error| CliError::MalformedConfig(e.to_string());
        self.model.validate().map_err(wrap)?;
        self.tokenizer.validate().map_err(wrap)?;
        self.pretrain.validate().map_err(wrap)?;
        if self.max_segments == 0 {
            return Err(CliError::MalformedConfig("max_segments must be positive".into()));
        }
        Ok(())
    }

    /// Points every random stream at `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synth.seed = seed;
        self.model.seed = seed;
        self.tokenizer.seed = seed;
        self.pretrain.seed = seed;
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

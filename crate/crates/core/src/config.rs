//! Model and training configuration shared by the tokenizer and pre-training.

use alloc::format;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Phase reconstruction loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PhaseLoss {
    /// Squared error on wrapped phase values.
    #[default]
    L2,
    /// `1 - cos(pred - target)`, insensitive to wrapping.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub decoder_layers: usize,
    pub patch_len: usize,
    pub rvq_layers: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub mask_ratio: f64,
    pub seed: u64,
    /// Rows in the learned position table; sequences longer than this are rejected.
    pub max_seq_len: usize,
    pub ema_decay: f64,
    /// Commitment weight.
    pub beta: f64,
    pub phase_loss: PhaseLoss,
    /// Accepted for config compatibility. Has no effect.
    pub symmetric_loss: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            encoder_layers: 2,
            heads: 4,
            ffn_dim: 256,
            decoder_layers: 1,
            patch_len: 200,
            rvq_layers: 3,
            codebook_size: 64,
            code_dim: 16,
            mask_ratio: 0.5,
            seed: 7,
            max_seq_len: 570,
            ema_decay: 0.99,
            beta: 1.0,
            phase_loss: PhaseLoss::L2,
            symmetric_loss: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.rvq_layers < 1 {
            return bad("rvq_layers must be at least 1");
        }
        if self.codebook_size < 2 {
            return bad("codebook_size must be at least 2");
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad("mask_ratio must lie strictly between 0 and 1");
        }
        if self.patch_len < 3 {
            return bad("patch_len must be at least 3");
        }
        if self.code_dim == 0 || self.ffn_dim == 0 || self.max_seq_len == 0 {
            return bad("code_dim, ffn_dim and max_seq_len must be positive");
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1]");
        }
        if !(self.beta >= 0.0) {
            return bad("beta must be non-negative");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Curriculum weight at the first step.
    pub curriculum_w0: f64,
    /// Curriculum weight at the final step.
    pub curriculum_wmax: f64,
    /// Temperature of the importance-weighted mask sampler.
    pub mask_temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            lr: 5e-4,
            weight_decay: 0.05,
            warmup_epochs: 1,
            min_lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 7,
            curriculum_w0: 0.2,
            curriculum_wmax: 0.7,
            mask_temperature: 0.8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.warmup_epochs > self.epochs {
            return bad("warmup_epochs must not exceed epochs");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return bad("min_lr must lie in [0, lr]");
        }
        if !(self.mask_temperature > 0.0) {
            return bad("mask_temperature must be positive");
        }
        Ok(())
    }
}

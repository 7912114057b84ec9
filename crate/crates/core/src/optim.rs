//! AdamW with a warmup + cosine learning-rate schedule.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::ParamStore;
use crate::config::TrainConfig;

/// Learning-rate schedule over optimizer steps `1..=total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn from_config(cfg: &TrainConfig, steps_per_epoch: usize) -> Self {
        Self {
            lr: cfg.lr,
            min_lr: cfg.min_lr,
            warmup_steps: cfg.warmup_epochs * steps_per_epoch,
            total_steps: cfg.epochs * steps_per_epoch,
        }
    }
}

/// Rate used for optimizer step `step`: linear from 0 at step 0 to `lr` at
/// the end of warmup, then half-cosine down to `min_lr` at `total_steps`.
pub fn lr_at(step: usize, s: &Schedule) -> f64 {
    if step <= s.warmup_steps && s.warmup_steps > 0 {
        return s.lr * step as f64 / s.warmup_steps as f64;
    }
    if step >= s.total_steps {
        return s.min_lr;
    }
    let span = (s.total_steps - s.warmup_steps) as f64;
    let progress = (step - s.warmup_steps) as f64 / span;
    s.min_lr + 0.5 * (s.lr - s.min_lr) * (1.0 + libm::cos(core::f64::consts::PI * progress))
}

/// Adam with decoupled weight decay. Decay applies only to tensors of rank
/// two or more (weights, tables), never to biases or norm gains.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(params: &ParamStore, cfg: &TrainConfig) -> Self {
        let m: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update. `grads[i]` is the gradient of parameter `i`, `None` when
    /// no gradient reached it (treated as zero).
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Vec<f64>>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for (i, g) in grads.iter().enumerate() {
            let decay = params.decays(i);
            let p = params.tensor_mut(i).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g.as_ref().map_or(0.0, |g| g[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let update = (m[j] / bc1) / (libm::sqrt(v[j] / bc2) + self.eps);
                let wd = if decay { self.weight_decay * p[j] } else { 0.0 };
                p[j] -= lr * (update + wd);
            }
        }
    }
}

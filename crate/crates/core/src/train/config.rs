use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    #[default]
    Pretrain,
    Finetune,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        }
    }
}

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub epochs: usize,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Input noise standard deviation relative to the window RMS (pretraining only).
    pub noise_coef: f64,
    pub seed: u64,
    pub steps_per_epoch: usize,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
    /// Held-out windows per dataset scored after every epoch.
    pub eval_windows: usize,
    pub phase: Phase,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 1e-3,
            epochs: 40,
            warmup_fraction: 0.2,
            batch_size: 8,
            beta1: 0.9,
            beta2: 0.9,
            weight_decay: 1e-6,
            noise_coef: crate::data::DEFAULT_NOISE_COEF,
            seed: 0,
            steps_per_epoch: 50,
            grad_clip: 1.0,
            eval_windows: 16,
            phase: Phase::Pretrain,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::config(format!("warmup_fraction must lie in (0, 1), got {}", self.warmup_fraction)));
        }
        if !(self.peak_lr > 0.0) || !self.peak_lr.is_finite() {
            return Err(Error::config(format!("peak_lr must be positive, got {}", self.peak_lr)));
        }
        if self.batch_size == 0 || self.steps_per_epoch == 0 {
            return Err(Error::config("batch_size and steps_per_epoch must be positive"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config("grad_clip must be positive"));
        }
        if !(self.noise_coef >= 0.0) {
            return Err(Error::config("noise_coef must be >= 0"));
        }
        self.adam().validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.beta1, beta2: self.beta2, weight_decay: self.weight_decay, ..AdamConfig::default() }
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }
}

/// Linear warmup from 0 to `peak_lr` over `round(warmup_fraction·total)`
/// steps, then half-cosine decay to 0 at `total_steps`.
pub fn one_cycle_lr(step: usize, total_steps: usize, warmup_fraction: f64, peak_lr: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::contract(format!("step {step} beyond schedule length {total_steps}")));
    }
    if total_steps == 0 {
        return Ok(0.0);
    }
    let warm = ((warmup_fraction * total_steps as f64).round() as usize).clamp(1, total_steps);
    if step <= warm {
        return Ok(peak_lr * step as f64 / warm as f64);
    }
    let span = (total_steps - warm) as f64;
    let progress = (step - warm) as f64 / span;
    Ok(peak_lr * 0.5 * (1.0 + (PI * progress).cos()))
}

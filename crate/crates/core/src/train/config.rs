// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub t_min: usize,
    pub t_max: usize,
    /// Peak learning rate per 256 samples; scaled linearly with the batch.
    pub lr_base: f64,
    /// Explicit peak learning rate, overriding the batch-scaled rule.
    pub lr_max: Option<f64>,
    pub lr_min: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    /// Backpropagate through at most this many final steps; `None` = all.
    pub bptt_window: Option<usize>,
    pub mim_weight: f64,
    pub mim_mask_ratio: f64,
    pub log_every: usize,
    pub val_every: usize,
    pub val_episodes: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch_size: 32,
            total_steps: 50_000,
            t_min: 20,
            t_max: 40,
            lr_base: 1.5e-4,
            lr_max: None,
            lr_min: 1e-8,
            warmup_fraction: 0.2,
            weight_decay: 5e-2,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            bptt_window: None,
            mim_weight: 1.0,
            mim_mask_ratio: 0.5,
            log_every: 10,
            val_every: 1000,
            val_episodes: 64,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn peak_lr(&self) -> f64 {
        self.lr_max.unwrap_or(self.lr_base * self.batch_size as f64 / 256.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if self.batch_size == 0 || self.total_steps == 0 {
            return bad("batch_size and total_steps must be positive");
        }
        if self.t_min == 0 || self.t_min > self.t_max {
            return bad("need 1 <= t_min <= t_max");
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad("warmup_fraction must lie in (0, 1)");
        }
        if !(self.peak_lr() >= 0.0 && self.lr_min >= 0.0) {
            return bad("learning rates must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.mim_mask_ratio > 0.0 && self.mim_mask_ratio <= 1.0) {
            return bad("mim_mask_ratio must lie in (0, 1]");
        }
        if self.bptt_window == Some(0) {
            return bad("bptt_window must be at least 1");
        }
        if self.log_every == 0 || self.val_every == 0 || self.checkpoint_every == 0 {
            return bad("log_every, val_every and checkpoint_every must be positive");
        }
        Ok(())
    }
}

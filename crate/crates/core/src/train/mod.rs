//! Optimization shared by both stages: AdamW with decoupled weight decay,
//! linear warmup plus cosine decay, and the stage runners.

mod optim;
mod run;

pub use optim::{adamw_step, grad_norm};
pub use run::{
    apply_weights, assign_weights, evaluate_stage1, evaluate_stage2, prepare_stage1, prepare_stage2, run_stage1, run_stage2, stage1_scene_loss, Stage1Options,
    Stage1Run, Stage1Scene, Stage2Options, Stage2Run, Stage2Scene, StepMetrics,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub min_lr_ratio: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub seed: u64,
    /// End the run after this many epochs while keeping the schedule of the
    /// full `epochs`; the checkpoint can then be resumed.
    pub stop_after_epochs: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.001,
            weight_decay: 0.05,
            batch_size: 8,
            epochs: 100,
            warmup_epochs: 10,
            min_lr_ratio: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
            seed: 0,
            stop_after_epochs: None,
        }
    }
}

impl TrainConfig {
    /// The published full-scale settings (batch 64).
    pub fn paper_defaults() -> Self {
        Self {
            batch_size: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.warmup_epochs > self.epochs {
            return bad(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return bad(format!("min_lr_ratio {} not in [0, 1]", self.min_lr_ratio));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("betas {:?} must lie in [0, 1)", self.betas));
        }
        if self.eps <= 0.0 {
            return bad("eps must be positive".into());
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_scenes: usize) -> usize {
        n_scenes.div_ceil(self.batch_size)
    }
}

/// Learning rate after `step` optimizer steps: linear warmup from 0 to
/// `base_lr` over `warmup_steps`, then cosine decay to
/// `base_lr * min_lr_ratio` at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, config: &TrainConfig) -> f64 {
    let base = config.base_lr;
    if step < warmup_steps {
        return base * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps);
    let progress = if span == 0 {
        0.0
    } else {
        (step - warmup_steps).min(span) as f64 / span as f64
    };
    let r = config.min_lr_ratio;
    base * (r + (1.0 - r) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

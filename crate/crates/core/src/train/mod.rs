//! Optimizer, schedule, data pipeline, deterministic training loop with
//! divergence detection, checkpointing, and the learning-rate frontier
//! sweep.

mod adamw;
mod checkpoint;
mod data;
mod frontier;
mod runner;
mod schedule;

pub use adamw::{adamw_step, OptimizerState};
pub use checkpoint::{checkpoint_load, checkpoint_save, Checkpoint, CHECKPOINT_MAGIC};
pub use data::{byte_detokenize, byte_tokenize, load_corpus, sample_batch};
pub use frontier::{lr_frontier_sweep, CellSummary, FrontierReport, SchemeFrontier};
pub use runner::{
    resume_training, train_loop, train_segment, RunRecord, RunStatus, StepRecord, TrainRun,
    WNormSample, MODEL_INIT_STREAM,
};
pub use schedule::cosine_lr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub divergence_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let peak_lr = 1e-3;
        Self {
            peak_lr,
            min_lr: peak_lr / 10.0,
            warmup_steps: 5,
            total_steps: 500,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            batch: 4,
            seq_len: 128,
            seed: 42,
            divergence_factor: 5.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // The optimizer defaults are part of the contract: Adam moment
    // coefficients 0.9 / 0.95, weight decay 0.1, cosine floor peak/10.
    #[test]
    fn optimizer_defaults_are_pinned() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.beta1, 0.9);
        assert_eq!(cfg.beta2, 0.95);
        assert_eq!(cfg.weight_decay, 0.1);
        assert_eq!(cfg.min_lr, cfg.peak_lr / 10.0);
        assert_eq!(cfg.divergence_factor, 5.0);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn validate_collects_violations() {
        let cfg = TrainConfig {
            peak_lr: -1.0,
            min_lr: 0.0,
            warmup_steps: 10,
            total_steps: 5,
            ..TrainConfig::default()
        };
        match cfg.validate() {
            Err(crate::Error::Config(msg)) => {
                assert!(msg.contains("peak_lr"));
                assert!(msg.contains("min_lr"));
                assert!(msg.contains("warmup_steps"));
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut violations = Vec::new();
        if !(self.peak_lr > 0.0) {
            violations.push("peak_lr must be positive".to_string());
        }
        if !(self.min_lr > 0.0 && self.min_lr <= self.peak_lr) {
            violations.push("min_lr must satisfy 0 < min_lr <= peak_lr".to_string());
        }
        // total_steps = 0 is a valid no-op run; otherwise warmup must end
        // strictly before the budget does.
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            violations.push("warmup_steps must be < total_steps".to_string());
        }
        if self.total_steps == 0 && self.warmup_steps != 0 {
            violations.push("warmup_steps must be 0 when total_steps is 0".to_string());
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                violations.push(format!("{name} must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            violations.push("adam_eps must be positive".to_string());
        }
        if self.weight_decay < 0.0 {
            violations.push("weight_decay must be nonnegative".to_string());
        }
        if self.batch == 0 {
            violations.push("batch must be >= 1".to_string());
        }
        if self.seq_len == 0 {
            violations.push("seq_len must be >= 1".to_string());
        }
        if !(self.divergence_factor > 0.0) {
            violations.push("divergence_factor must be positive".to_string());
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(violations.join("; ")))
        }
    }
}

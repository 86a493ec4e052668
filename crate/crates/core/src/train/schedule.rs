//! Warmup + cosine learning-rate schedule.

use super::TrainConfig;
use crate::error::{Error, Result};

/// Linear ramp `0 -> peak_lr` over `warmup_steps`, then a cosine decay down
/// to `min_lr` over the remaining budget. `step` counts from 0 and may be at
/// most `total_steps`.
pub fn cosine_lr(cfg: &TrainConfig, step: u64) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::Domain(format!(
            "step {} is outside the schedule (total_steps {})",
            step, cfg.total_steps
        )));
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.peak_lr * step as f64 / cfg.warmup_steps as f64);
    }
    let decay_steps = cfg.total_steps - cfg.warmup_steps;
    if decay_steps == 0 {
        return Ok(cfg.peak_lr);
    }
    let progress = (step - cfg.warmup_steps) as f64 / decay_steps as f64;
    Ok(cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

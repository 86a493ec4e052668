//! Deterministic training loop with divergence detection.
//!
//! All randomness derives from `(cfg.seed, stream)`: the model is built on
//! stream [`MODEL_INIT_STREAM`] and the batch at step `k` comes from stream
//! `BATCH_STREAM_BASE + k`, so resuming from a checkpoint replays the exact
//! batch sequence without persisting generator state.

use serde::Serialize;

use super::adamw::{adamw_step, OptimizerState};
use super::data::sample_batch;
use super::schedule::cosine_lr;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::ModelState;
use crate::real::Real;
use crate::rng::RngStream;
use crate::spectral::spectral_norm_fixed;

/// Stream id used to initialize model weights from the training seed.
pub const MODEL_INIT_STREAM: u64 = 0;
/// Stream id base for the per-step batch sampler.
const BATCH_STREAM_BASE: u64 = 1 << 40;
/// Record the designated projection's spectral norm every this many steps.
const W_NORM_EVERY: u64 = 50;
/// Consecutive over-threshold steps that count as divergence.
const DIVERGENCE_PATIENCE: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged { step: u64 },
}

impl std::fmt::Display for RunStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunStatus::Completed => write!(f, "completed"),
            RunStatus::Diverged { step } => write!(f, "diverged@{step}"),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Spectral norm of the designated projection (layer 0 `wq`), sampled
/// periodically to expose the weight-scale trajectory.
#[derive(Debug, Clone, Serialize)]
pub struct WNormSample {
    pub step: u64,
    pub sigma: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub steps: Vec<StepRecord>,
    pub status: RunStatus,
    pub w_norm_trace: Vec<WNormSample>,
}

impl RunRecord {
    pub fn initial_loss(&self) -> Option<f64> {
        self.steps.first().map(|s| s.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }

    /// Flat rows `scheme,lr,seed,step,loss,status`.
    pub fn to_csv(&self, scheme: &str, peak_lr: f64, seed: u64) -> String {
        let mut out = String::from("scheme,lr,seed,step,loss,status\n");
        for s in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                scheme, peak_lr, seed, s.step, s.loss, self.status
            ));
        }
        out
    }
}

#[derive(Debug)]
pub struct TrainRun<T: Real> {
    pub model: ModelState<T>,
    pub opt: OptimizerState<T>,
    pub record: RunRecord,
}

fn w_norm_sample<T: Real>(model: &ModelState<T>) -> Option<f64> {
    let offs = &model.layout.blocks[0];
    let e = model.cfg.dim;
    let data: Vec<f64> = model.params[offs.wq..offs.wq + e * e]
        .iter()
        .map(|v| v.to_f64())
        .collect();
    let w = Matrix::from_vec(e, e, data).expect("wq is square");
    spectral_norm_fixed(&w).ok().filter(|s| s.is_finite())
}

fn train_range<T: Real>(
    mut model: ModelState<T>,
    mut opt: OptimizerState<T>,
    data: &[usize],
    cfg: &TrainConfig,
    start_step: u64,
    stop_step: u64,
    baseline_loss: Option<f64>,
) -> Result<TrainRun<T>> {
    cfg.validate()?;
    if stop_step > cfg.total_steps {
        return Err(Error::Config(format!(
            "stop step {} is past the schedule horizon {}",
            stop_step, cfg.total_steps
        )));
    }
    if cfg.seq_len > model.cfg.seq_len {
        return Err(Error::Config(format!(
            "training seq_len {} exceeds the model's seq_len {}",
            cfg.seq_len, model.cfg.seq_len
        )));
    }

    let mut record = RunRecord {
        steps: Vec::new(),
        status: RunStatus::Completed,
        w_norm_trace: Vec::new(),
    };
    let mut baseline = baseline_loss;
    let mut over_threshold = 0u32;
    let mut grads = vec![T::ZERO; model.layout.total];
    let weight = T::from_f64(1.0 / cfg.batch as f64);

    for step in start_step..stop_step {
        let lr = cosine_lr(cfg, step)?;
        let mut rng = RngStream::new(cfg.seed, BATCH_STREAM_BASE + step);
        let (tokens, targets) = sample_batch(data, cfg.batch, cfg.seq_len, &mut rng)?;

        grads.fill(T::ZERO);
        let mut loss_sum = 0.0;
        let mut diverged = false;
        for (tok, tgt) in tokens.iter().zip(&targets) {
            match crate::model::accumulate_loss_and_grads(&model, tok, tgt, &mut grads, weight) {
                Ok(item_loss) => loss_sum += item_loss,
                Err(Error::NonFiniteLoss { .. }) => {
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let loss = loss_sum / cfg.batch as f64;
        if diverged || !loss.is_finite() {
            record.status = RunStatus::Diverged { step };
            break;
        }

        record.steps.push(StepRecord { step, lr, loss });
        if baseline.is_none() {
            baseline = Some(loss);
        }
        if loss > cfg.divergence_factor * baseline.unwrap() {
            over_threshold += 1;
            if over_threshold >= DIVERGENCE_PATIENCE {
                record.status = RunStatus::Diverged { step };
                break;
            }
        } else {
            over_threshold = 0;
        }

        match adamw_step(&model.layout, &mut model.params, &grads, &mut opt, lr, cfg) {
            Ok(()) => {}
            Err(Error::NonFiniteLoss { .. }) => {
                record.status = RunStatus::Diverged { step };
                break;
            }
            Err(e) => return Err(e),
        }

        if step % W_NORM_EVERY == 0 {
            if let Some(sigma) = w_norm_sample(&model) {
                record.w_norm_trace.push(WNormSample { step, sigma });
            }
        }
    }

    Ok(TrainRun { model, opt, record })
}

/// Trains `model` from scratch for `cfg.total_steps` steps (or stops early
/// at divergence; divergence is recorded, not raised).
pub fn train_loop<T: Real>(
    model: ModelState<T>,
    data: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainRun<T>> {
    let total = model.layout.total;
    train_range(
        model,
        OptimizerState::new(total),
        data,
        cfg,
        0,
        cfg.total_steps,
        None,
    )
}

/// Runs steps `[start_step, stop_step)` of the schedule described by `cfg`.
/// The learning-rate horizon stays `cfg.total_steps`, so splitting a run
/// into segments at checkpoint boundaries reproduces the uninterrupted run
/// exactly. Pass the original run's first recorded loss as `baseline_loss`
/// when resuming so the divergence threshold matches.
pub fn train_segment<T: Real>(
    model: ModelState<T>,
    opt: OptimizerState<T>,
    data: &[usize],
    cfg: &TrainConfig,
    start_step: u64,
    stop_step: u64,
    baseline_loss: Option<f64>,
) -> Result<TrainRun<T>> {
    train_range(model, opt, data, cfg, start_step, stop_step, baseline_loss)
}

/// Continues a checkpointed run from `start_step` to `cfg.total_steps`.
pub fn resume_training<T: Real>(
    model: ModelState<T>,
    opt: OptimizerState<T>,
    start_step: u64,
    data: &[usize],
    cfg: &TrainConfig,
    baseline_loss: Option<f64>,
) -> Result<TrainRun<T>> {
    train_range(
        model,
        opt,
        data,
        cfg,
        start_step,
        cfg.total_steps,
        baseline_loss,
    )
}

//! AdamW with decoupled weight decay.
//!
//! Decay applies only to parameters whose registry entry is flagged
//! `decay` (projection matrices and the head); gains and embeddings are
//! exempt, so the normalization's scale-setting role is untouched by
//! regularization.

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::Layout;
use crate::real::Real;

#[derive(Debug, Clone)]
pub struct OptimizerState<T: Real> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(total_params: usize) -> Self {
        Self {
            m: vec![T::ZERO; total_params],
            v: vec![T::ZERO; total_params],
            step: 0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().all(|x| x.is_finite()) && self.v.iter().all(|x| x.is_finite())
    }
}

/// One optimizer step:
///
/// ```text
/// m <- b1 m + (1-b1) g         v <- b2 v + (1-b2) g^2
/// theta <- theta - lr (m_hat / (sqrt(v_hat) + eps) + lambda theta)
/// ```
///
/// with bias-corrected `m_hat`, `v_hat` and `lambda` zero for non-decayed
/// entries. Non-finite gradients are reported as a divergence signal.
pub fn adamw_step<T: Real>(
    layout: &Layout,
    params: &mut [T],
    grads: &[T],
    opt: &mut OptimizerState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != layout.total || grads.len() != layout.total {
        return Err(Error::Shape(format!(
            "parameter/gradient length {} / {} does not match layout total {}",
            params.len(),
            grads.len(),
            layout.total
        )));
    }
    if lr < 0.0 {
        return Err(Error::Domain(format!("learning rate must be >= 0, got {lr}")));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss {
            context: format!("non-finite gradient at optimizer step {}", opt.step + 1),
        });
    }

    opt.step += 1;
    let t = opt.step as i32;
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one_m_b1 = T::from_f64(1.0 - cfg.beta1);
    let one_m_b2 = T::from_f64(1.0 - cfg.beta2);
    let inv_bc1 = T::from_f64(1.0 / (1.0 - cfg.beta1.powi(t)));
    let inv_bc2 = T::from_f64(1.0 / (1.0 - cfg.beta2.powi(t)));
    let lr_t = T::from_f64(lr);
    let eps = T::from_f64(cfg.adam_eps);

    for entry in &layout.entries {
        let lambda = if entry.decay {
            T::from_f64(cfg.weight_decay)
        } else {
            T::ZERO
        };
        let range = entry.offset..entry.offset + entry.len;
        for i in range {
            let g = grads[i];
            opt.m[i] = b1 * opt.m[i] + one_m_b1 * g;
            opt.v[i] = b2 * opt.v[i] + one_m_b2 * g * g;
            let m_hat = opt.m[i] * inv_bc1;
            let v_hat = opt.v[i] * inv_bc2;
            params[i] -= lr_t * (m_hat / (v_hat.sqrt() + eps) + lambda * params[i]);
        }
    }
    Ok(())
}

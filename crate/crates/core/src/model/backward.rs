//! Reverse-mode gradients through the full graph.
//!
//! The backward is hand-written per operation; the normalized-projection
//! sites use the same closed form as the operator module's input gradient,
//! with the guarded denominator of the training path.

use super::forward::{forward_tape, sigmoid, BlockTape, PsiCache, Tape};
use super::{FfnKind, ModelState, Scheme, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;

/// Addresses one normalized-projection site for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiteId {
    Q,
    K,
    V,
    O,
    W1,
    W2,
    W3,
}

/// Captured site-local quantities for one token: the site input, the
/// upstream gradient at the site output, and the computed input gradient.
/// Used to cross-check the model backward against the operator formulas.
#[derive(Debug, Clone)]
pub struct SiteCapture {
    pub layer: usize,
    pub site: SiteId,
    pub token: usize,
    pub input: Vec<f64>,
    pub upstream: Vec<f64>,
    pub input_grad: Vec<f64>,
}

struct CaptureSlot<'a> {
    layer: usize,
    site: SiteId,
    token: usize,
    out: &'a mut Option<SiteCapture>,
}

/// Mean next-token cross-entropy over positions plus its logit gradient,
/// scaled by `weight` (used for batch averaging).
fn cross_entropy_backward<T: Real>(
    logits: &Tensor<T>,
    targets: &[usize],
    weight: T,
) -> Result<(f64, Tensor<T>)> {
    let n = logits.rows();
    let vocab = logits.cols();
    if targets.len() != n {
        return Err(Error::Data(format!(
            "targets length {} does not match tokens length {}",
            targets.len(),
            n
        )));
    }
    for (position, &t) in targets.iter().enumerate() {
        if t >= vocab {
            return Err(Error::TokenOutOfRange {
                token: t,
                position,
                vocab,
            });
        }
    }
    let inv_n = T::from_f64(1.0 / n as f64);
    let mut loss = T::ZERO;
    let mut d_logits = Tensor::zeros(n, vocab);
    for t in 0..n {
        let row = logits.row(t);
        let mut max = row[0];
        for &v in row.iter().skip(1) {
            if v > max {
                max = v;
            }
        }
        let mut z = T::ZERO;
        let d_row = d_logits.row_mut(t);
        for (c, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            d_row[c] = e;
            z += e;
        }
        let target = targets[t];
        loss += -(row[target] - max - z.ln());
        let scale = weight * inv_n;
        for (c, slot) in d_row.iter_mut().enumerate() {
            let p = *slot / z;
            let delta = if c == target { T::ONE } else { T::ZERO };
            *slot = (p - delta) * scale;
        }
    }
    Ok(((loss * inv_n).to_f64(), d_logits))
}

/// Plain projection backward: accumulates `dW += dz^T input` and returns
/// `d_input = dz W`.
fn project_backward<T: Real>(
    params: &[T],
    grads: &mut [T],
    w_off: usize,
    in_dim: usize,
    input: &Tensor<T>,
    dz: &Tensor<T>,
) -> Tensor<T> {
    let n = input.rows();
    let mut d_input = Tensor::zeros(n, in_dim);
    for t in 0..n {
        let x_row = input.row(t);
        let dz_row = dz.row(t);
        let d_in_row = d_input.row_mut(t);
        for (o, &g) in dz_row.iter().enumerate() {
            let w_row = &params[w_off + o * in_dim..w_off + (o + 1) * in_dim];
            let dw_row = &mut grads[w_off + o * in_dim..w_off + (o + 1) * in_dim];
            for i in 0..in_dim {
                dw_row[i] += g * x_row[i];
                d_in_row[i] += g * w_row[i];
            }
        }
    }
    d_input
}

/// Backward of `y = gamma .* sqrt(d) z / shat`: returns `dz` and
/// accumulates `dgamma`.
fn psi_backward<T: Real>(
    params: &[T],
    grads: &mut [T],
    gamma_off: usize,
    cache: &PsiCache<T>,
    upstream: &Tensor<T>,
) -> Tensor<T> {
    let n = upstream.rows();
    let d = upstream.cols();
    let sqrt_d = T::from_f64((d as f64).sqrt());
    let gamma = &params[gamma_off..gamma_off + d];
    let mut dz = Tensor::zeros(n, d);
    for t in 0..n {
        let z_row = cache.z.row(t);
        let dy = upstream.row(t);
        let s = cache.shat[t];
        let coef = sqrt_d / s;
        let coef3 = coef / (s * s);
        // w = gamma .* dy; wz = w . z
        let mut wz = T::ZERO;
        for c in 0..d {
            wz += gamma[c] * dy[c] * z_row[c];
        }
        let dz_row = dz.row_mut(t);
        let dgamma = &mut grads[gamma_off..gamma_off + d];
        for c in 0..d {
            dz_row[c] = coef * (gamma[c] * dy[c]) - coef3 * wz * z_row[c];
            dgamma[c] += dy[c] * z_row[c] * coef;
        }
    }
    dz
}

/// Backward of `y = gain .* x * inv`: returns `dx`, accumulates `dgain`.
fn rms_backward<T: Real>(
    params: &[T],
    grads: &mut [T],
    gain_off: usize,
    x: &Tensor<T>,
    inv: &[T],
    upstream: &Tensor<T>,
) -> Tensor<T> {
    let n = x.rows();
    let e = x.cols();
    let gain = &params[gain_off..gain_off + e];
    let inv_e = T::from_f64(1.0 / e as f64);
    let mut dx = Tensor::zeros(n, e);
    for t in 0..n {
        let x_row = x.row(t);
        let dy = upstream.row(t);
        let m = inv[t];
        let mut wx = T::ZERO;
        for c in 0..e {
            wx += gain[c] * dy[c] * x_row[c];
        }
        // 1/shat^2 = inv^2 / E
        let coef3 = m * m * m * wx * inv_e;
        let dx_row = dx.row_mut(t);
        let dgain = &mut grads[gain_off..gain_off + e];
        for c in 0..e {
            dx_row[c] = m * (gain[c] * dy[c]) - coef3 * x_row[c];
            dgain[c] += dy[c] * x_row[c] * m;
        }
    }
    dx
}

/// Backward of the per-head query/key normalization.
fn qk_backward<T: Real>(
    params: &[T],
    grads: &mut [T],
    gain_off: usize,
    raw: &Tensor<T>,
    shat: &[T],
    n_heads: usize,
    upstream: &Tensor<T>,
) -> Tensor<T> {
    let n = raw.rows();
    let hd = raw.cols() / n_heads;
    let sqrt_hd = T::from_f64((hd as f64).sqrt());
    let mut dq = Tensor::zeros(n, raw.cols());
    for t in 0..n {
        for h in 0..n_heads {
            let base = h * hd;
            let q = &raw.row(t)[base..base + hd];
            let dy = &upstream.row(t)[base..base + hd];
            let s = shat[t * n_heads + h];
            let g = params[gain_off + h];
            let mut qdy = T::ZERO;
            for c in 0..hd {
                qdy += q[c] * dy[c];
            }
            grads[gain_off + h] += sqrt_hd / s * qdy;
            let f1 = g * sqrt_hd / s;
            let f3 = f1 / (s * s);
            let dq_row = dq.row_mut(t);
            for c in 0..hd {
                dq_row[base + c] = f1 * dy[c] - f3 * qdy * q[c];
            }
        }
    }
    dq
}

fn attention_backward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    att_p: &[Tensor<T>],
    n_heads: usize,
    d_ctx: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let n = q.rows();
    let e = q.cols();
    let hd = e / n_heads;
    let inv_sqrt = T::from_f64(1.0 / (hd as f64).sqrt());
    let mut dq = Tensor::zeros(n, e);
    let mut dk = Tensor::zeros(n, e);
    let mut dv = Tensor::zeros(n, e);
    let mut dp = vec![T::ZERO; n];
    let mut ds = vec![T::ZERO; n];
    for h in 0..n_heads {
        let base = h * hd;
        let p = &att_p[h];
        for t in 0..n {
            let p_row = p.row(t);
            let dctx_row = &d_ctx.row(t)[base..base + hd];
            // dv and dp
            let mut dot = T::ZERO;
            for j in 0..=t {
                let v_row = &v.row(j)[base..base + hd];
                let mut acc = T::ZERO;
                for c in 0..hd {
                    acc += dctx_row[c] * v_row[c];
                }
                dp[j] = acc;
                dot += p_row[j] * acc;
                let dv_row = dv.row_mut(j);
                for c in 0..hd {
                    dv_row[base + c] += p_row[j] * dctx_row[c];
                }
            }
            // softmax jacobian then score gradients
            for j in 0..=t {
                ds[j] = p_row[j] * (dp[j] - dot);
            }
            let q_row: Vec<T> = q.row(t)[base..base + hd].to_vec();
            let dq_row = dq.row_mut(t);
            for j in 0..=t {
                let s = ds[j] * inv_sqrt;
                let k_row = &k.row(j)[base..base + hd];
                for c in 0..hd {
                    dq_row[base + c] += s * k_row[c];
                }
            }
            for j in 0..=t {
                let s = ds[j] * inv_sqrt;
                let dk_row = dk.row_mut(j);
                for c in 0..hd {
                    dk_row[base + c] += s * q_row[c];
                }
            }
        }
    }
    (dq, dk, dv)
}

struct SiteCtx<'a, T: Real> {
    params: &'a [T],
    w_off: usize,
    gamma_off: Option<usize>,
    layer: usize,
    site: SiteId,
}

/// Backward through one projection site (plain or normalized), optionally
/// capturing the site-local input gradient for one token.
fn site_backward<T: Real>(
    ctx: SiteCtx<'_, T>,
    grads: &mut [T],
    input: &Tensor<T>,
    psi: Option<&PsiCache<T>>,
    upstream: &Tensor<T>,
    capture: &mut Option<CaptureSlot<'_>>,
) -> Tensor<T> {
    let dz = match (psi, ctx.gamma_off) {
        (Some(cache), Some(g_off)) => psi_backward(ctx.params, grads, g_off, cache, upstream),
        _ => upstream.clone(),
    };
    let d_input = project_backward(ctx.params, grads, ctx.w_off, input.cols(), input, &dz);
    if let Some(slot) = capture {
        if slot.layer == ctx.layer && slot.site == ctx.site {
            let t = slot.token;
            *slot.out = Some(SiteCapture {
                layer: slot.layer,
                site: slot.site,
                token: t,
                input: input.row(t).iter().map(|v| v.to_f64()).collect(),
                upstream: upstream.row(t).iter().map(|v| v.to_f64()).collect(),
                input_grad: d_input.row(t).iter().map(|v| v.to_f64()).collect(),
            });
        }
    }
    d_input
}

fn add_into<T: Real>(dst: &mut Tensor<T>, src: &Tensor<T>) {
    for t in 0..dst.rows() {
        let d = dst.row_mut(t);
        for (c, slot) in d.iter_mut().enumerate() {
            *slot += src.at(t, c);
        }
    }
}

fn block_backward<T: Real>(
    model: &ModelState<T>,
    layer: usize,
    tape: &BlockTape<T>,
    grads: &mut [T],
    d_out: Tensor<T>,
    capture: &mut Option<CaptureSlot<'_>>,
) -> Tensor<T> {
    let cfg = &model.cfg;
    let p = &model.params;
    let offs = &model.layout.blocks[layer];
    let sn = cfg.scheme == Scheme::Simplenorm;
    let f = cfg.ffn_dim;

    // x_out = x_mid + f_out
    let d_f_out = &d_out;
    let d_act = site_backward(
        SiteCtx {
            params: p,
            w_off: offs.w2,
            gamma_off: offs.gamma_w2,
            layer,
            site: SiteId::W2,
        },
        grads,
        &tape.act,
        tape.psi_w2.as_ref(),
        d_f_out,
        capture,
    );

    // activation backward
    let (d_h1, d_h3) = match cfg.ffn_kind {
        FfnKind::MlpRelu => {
            let mut d_h1 = Tensor::zeros(d_act.rows(), f);
            for t in 0..d_act.rows() {
                for c in 0..f {
                    if tape.h1.at(t, c) > T::ZERO {
                        d_h1.set(t, c, d_act.at(t, c));
                    }
                }
            }
            (d_h1, None)
        }
        FfnKind::Swiglu => {
            let h3 = tape.h3.as_ref().unwrap();
            let mut d_h1 = Tensor::zeros(d_act.rows(), f);
            let mut d_h3 = Tensor::zeros(d_act.rows(), f);
            for t in 0..d_act.rows() {
                for c in 0..f {
                    let a = tape.h1.at(t, c);
                    let sig = sigmoid(a);
                    let swish = a * sig;
                    let dswish = sig * (T::ONE + a * (T::ONE - sig));
                    d_h1.set(t, c, d_act.at(t, c) * h3.at(t, c) * dswish);
                    d_h3.set(t, c, d_act.at(t, c) * swish);
                }
            }
            (d_h1, Some(d_h3))
        }
    };

    let mut d_a2 = site_backward(
        SiteCtx {
            params: p,
            w_off: offs.w1,
            gamma_off: offs.gamma_w1,
            layer,
            site: SiteId::W1,
        },
        grads,
        &tape.a2,
        tape.psi_w1.as_ref(),
        &d_h1,
        capture,
    );
    if let Some(d_h3) = d_h3 {
        let d_a2_gate = site_backward(
            SiteCtx {
                params: p,
                w_off: offs.w3.unwrap(),
                gamma_off: offs.gamma_w3,
                layer,
                site: SiteId::W3,
            },
            grads,
            &tape.a2,
            tape.psi_w3.as_ref(),
            &d_h3,
            capture,
        );
        add_into(&mut d_a2, &d_a2_gate);
    }

    // d_x_mid = residual + (through ln2 when present)
    let mut d_x_mid = if sn {
        d_a2
    } else {
        rms_backward(
            p,
            grads,
            offs.ln2.unwrap(),
            &tape.x_mid,
            tape.ln2_inv.as_ref().unwrap(),
            &d_a2,
        )
    };
    add_into(&mut d_x_mid, &d_out);

    // attention branch: x_mid = x_in + o_out
    let d_ctx = site_backward(
        SiteCtx {
            params: p,
            w_off: offs.wo,
            gamma_off: offs.gamma_o,
            layer,
            site: SiteId::O,
        },
        grads,
        &tape.ctx,
        tape.psi_o.as_ref(),
        &d_x_mid,
        capture,
    );

    let (d_q, d_k, d_v) =
        attention_backward(&tape.q, &tape.k, &tape.v, &tape.att_p, cfg.n_heads, &d_ctx);

    let (d_q0, d_k0) = if cfg.scheme == Scheme::PrenormQknorm {
        let dq = qk_backward(
            p,
            grads,
            offs.q_gain.unwrap(),
            tape.q_pre.as_ref().unwrap(),
            tape.q_shat.as_ref().unwrap(),
            cfg.n_heads,
            &d_q,
        );
        let dk = qk_backward(
            p,
            grads,
            offs.k_gain.unwrap(),
            tape.k_pre.as_ref().unwrap(),
            tape.k_shat.as_ref().unwrap(),
            cfg.n_heads,
            &d_k,
        );
        (dq, dk)
    } else {
        (d_q, d_k)
    };

    let mut d_a1 = site_backward(
        SiteCtx {
            params: p,
            w_off: offs.wq,
            gamma_off: offs.gamma_q,
            layer,
            site: SiteId::Q,
        },
        grads,
        &tape.a1,
        tape.psi_q.as_ref(),
        &d_q0,
        capture,
    );
    let d_a1_k = site_backward(
        SiteCtx {
            params: p,
            w_off: offs.wk,
            gamma_off: offs.gamma_k,
            layer,
            site: SiteId::K,
        },
        grads,
        &tape.a1,
        tape.psi_k.as_ref(),
        &d_k0,
        capture,
    );
    let d_a1_v = site_backward(
        SiteCtx {
            params: p,
            w_off: offs.wv,
            gamma_off: offs.gamma_v,
            layer,
            site: SiteId::V,
        },
        grads,
        &tape.a1,
        tape.psi_v.as_ref(),
        &d_v,
        capture,
    );
    add_into(&mut d_a1, &d_a1_k);
    add_into(&mut d_a1, &d_a1_v);

    let mut d_x_in = if sn {
        d_a1
    } else {
        rms_backward(
            p,
            grads,
            offs.ln1.unwrap(),
            &tape.x_in,
            tape.ln1_inv.as_ref().unwrap(),
            &d_a1,
        )
    };
    add_into(&mut d_x_in, &d_x_mid);
    d_x_in
}

fn backward_from_tape<T: Real>(
    model: &ModelState<T>,
    tokens: &[usize],
    targets: &[usize],
    tape: &Tape<T>,
    grads: &mut [T],
    weight: T,
    mut capture: Option<CaptureSlot<'_>>,
) -> Result<f64> {
    let cfg = &model.cfg;
    let p = &model.params;
    let layout = &model.layout;
    let e = cfg.dim;

    let (loss, d_logits) = cross_entropy_backward(&tape.logits, targets, weight)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            context: format!("cross-entropy over {} positions", tokens.len()),
        });
    }

    // head: logits = x_final W_head^T
    let d_x_final = project_backward(p, grads, layout.head, e, &tape.x_final, &d_logits);

    let mut d_x = if let Some(g_off) = layout.final_gain {
        rms_backward(
            p,
            grads,
            g_off,
            &tape.x_pre_final,
            tape.final_inv.as_ref().unwrap(),
            &d_x_final,
        )
    } else {
        d_x_final
    };

    for layer in (0..cfg.n_layers).rev() {
        d_x = block_backward(model, layer, &tape.blocks[layer], grads, d_x, &mut capture);
    }

    // embeddings
    for (t, &tok) in tokens.iter().enumerate() {
        let d_row = d_x.row(t);
        let tok_slice = &mut grads[layout.tok_emb + tok * e..layout.tok_emb + (tok + 1) * e];
        for (c, slot) in tok_slice.iter_mut().enumerate() {
            *slot += d_row[c];
        }
        let pos_slice = &mut grads[layout.pos_emb + t * e..layout.pos_emb + (t + 1) * e];
        for (c, slot) in pos_slice.iter_mut().enumerate() {
            *slot += d_row[c];
        }
    }

    Ok(loss)
}

/// Accumulates gradients for one sequence into `grads` with the given
/// weight; returns the (unweighted) mean cross-entropy. Used directly by
/// the training loop for batch averaging.
pub(crate) fn accumulate_loss_and_grads<T: Real>(
    model: &ModelState<T>,
    tokens: &[usize],
    targets: &[usize],
    grads: &mut [T],
    weight: T,
) -> Result<f64> {
    let tape = forward_tape(model, tokens, None)?;
    backward_from_tape(model, tokens, targets, &tape, grads, weight, None)
}

/// Next-token cross-entropy averaged over positions, plus gradients for
/// every parameter in layout order.
pub fn loss_and_grads<T: Real>(
    model: &ModelState<T>,
    tokens: &[usize],
    targets: &[usize],
) -> Result<(f64, Vec<T>)> {
    let mut grads = vec![T::ZERO; model.layout.total];
    let loss = accumulate_loss_and_grads(model, tokens, targets, &mut grads, T::ONE)?;
    Ok((loss, grads))
}

/// [`loss_and_grads`] that additionally captures the site-local input,
/// upstream gradient and input gradient of one normalized-projection site
/// at one token. Diagnostic path for cross-checking against the operator
/// module.
pub fn loss_and_grads_captured<T: Real>(
    model: &ModelState<T>,
    tokens: &[usize],
    targets: &[usize],
    layer: usize,
    site: SiteId,
    token: usize,
) -> Result<(f64, Vec<T>, SiteCapture)> {
    let mut grads = vec![T::ZERO; model.layout.total];
    let tape = forward_tape(model, tokens, None)?;
    let mut out = None;
    let slot = CaptureSlot {
        layer,
        site,
        token,
        out: &mut out,
    };
    let loss = backward_from_tape(model, tokens, targets, &tape, &mut grads, T::ONE, Some(slot))?;
    let capture = out.ok_or_else(|| {
        Error::Data(format!(
            "site capture did not match any site (layer {layer}, token {token})"
        ))
    })?;
    Ok((loss, grads, capture))
}

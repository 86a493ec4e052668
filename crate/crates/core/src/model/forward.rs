//! Forward pass: embeddings, blocks, final norm, logits, and the
//! activation-norm probe. The tape kept here feeds the reverse pass.

use super::{ActivationProbe, FfnKind, ModelState, Scheme, Tensor, NORM_EPS};
use crate::error::{Error, Result};
use crate::real::Real;

/// `out[t] = W input[t]` for a row-major `W` of shape `(out_dim, in_dim)`
/// stored at `w_off` in the flat parameter buffer.
pub(super) fn project<T: Real>(
    params: &[T],
    w_off: usize,
    out_dim: usize,
    in_dim: usize,
    input: &Tensor<T>,
) -> Tensor<T> {
    debug_assert_eq!(input.cols(), in_dim);
    let mut out = Tensor::zeros(input.rows(), out_dim);
    for t in 0..input.rows() {
        let x = input.row(t);
        let out_row = out.row_mut(t);
        for (o, slot) in out_row.iter_mut().enumerate() {
            let w_row = &params[w_off + o * in_dim..w_off + (o + 1) * in_dim];
            let mut acc = T::ZERO;
            for (w, xi) in w_row.iter().zip(x) {
                acc += *w * *xi;
            }
            *slot = acc;
        }
    }
    out
}

/// Per-token guarded norm `sqrt(|z|^2 + eps^2 * width)`.
fn guarded_norm<T: Real>(row: &[T]) -> T {
    let mut acc = T::ZERO;
    for v in row {
        acc += *v * *v;
    }
    let eps2 = T::from_f64(NORM_EPS * NORM_EPS * row.len() as f64);
    (acc + eps2).sqrt()
}

/// Cache of one normalized-projection site.
#[derive(Debug, Clone)]
pub(super) struct PsiCache<T> {
    pub z: Tensor<T>,
    pub shat: Vec<T>,
}

/// `y = gamma .* sqrt(d) z / sqrt(|z|^2 + eps^2 d)` per token.
pub(super) fn psi_apply<T: Real>(gamma: &[T], z: Tensor<T>) -> (Tensor<T>, PsiCache<T>) {
    let width = z.cols();
    let sqrt_d = T::from_f64((width as f64).sqrt());
    let mut out = Tensor::zeros(z.rows(), width);
    let mut shat = Vec::with_capacity(z.rows());
    for t in 0..z.rows() {
        let s = guarded_norm(z.row(t));
        shat.push(s);
        let scale = sqrt_d / s;
        let out_row = out.row_mut(t);
        for (c, slot) in out_row.iter_mut().enumerate() {
            *slot = gamma[c] * z.at(t, c) * scale;
        }
    }
    (out, PsiCache { z, shat })
}

/// RMS normalization with gain: `y = gain .* x * sqrt(E) / sqrt(|x|^2 + eps^2 E)`.
/// Returns the per-token multiplier `inv = sqrt(E) / shat` for the backward.
pub(super) fn rms_apply<T: Real>(gain: &[T], x: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
    let width = x.cols();
    let sqrt_e = T::from_f64((width as f64).sqrt());
    let mut out = Tensor::zeros(x.rows(), width);
    let mut inv = Vec::with_capacity(x.rows());
    for t in 0..x.rows() {
        let s = guarded_norm(x.row(t));
        let m = sqrt_e / s;
        inv.push(m);
        let out_row = out.row_mut(t);
        for (c, slot) in out_row.iter_mut().enumerate() {
            *slot = gain[c] * x.at(t, c) * m;
        }
    }
    (out, inv)
}

/// Per-head RMS normalization of query/key rows with one learned scalar gain
/// per head: each head-slice of each token is rescaled to L2 norm
/// `gain * sqrt(head_dim)`.
pub(super) fn qk_normalize<T: Real>(
    x: &Tensor<T>,
    gains: &[T],
    n_heads: usize,
) -> (Tensor<T>, Vec<T>) {
    let hd = x.cols() / n_heads;
    let sqrt_hd = T::from_f64((hd as f64).sqrt());
    let mut out = Tensor::zeros(x.rows(), x.cols());
    let mut shat = Vec::with_capacity(x.rows() * n_heads);
    for t in 0..x.rows() {
        for h in 0..n_heads {
            let s = guarded_norm(&x.row(t)[h * hd..(h + 1) * hd]);
            shat.push(s);
            let scale = gains[h] * sqrt_hd / s;
            for c in 0..hd {
                out.set(t, h * hd + c, x.at(t, h * hd + c) * scale);
            }
        }
    }
    (out, shat)
}

/// Standalone query/key normalization, applied before the attention dot
/// product when the scheme is `prenorm_qknorm`.
pub fn qknorm_apply<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    q_gains: &[T],
    k_gains: &[T],
    n_heads: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if q.cols() % n_heads != 0 || k.cols() % n_heads != 0 {
        return Err(Error::Shape("q/k width must divide by n_heads".into()));
    }
    if q_gains.len() != n_heads || k_gains.len() != n_heads {
        return Err(Error::Shape("one gain per head expected".into()));
    }
    let (qn, _) = qk_normalize(q, q_gains, n_heads);
    let (kn, _) = qk_normalize(k, k_gains, n_heads);
    Ok((qn, kn))
}

/// Causal scaled-dot-product attention. Returns the per-head probability
/// matrices (rows = query position, cols = key position, zero above the
/// diagonal) for the backward pass.
pub(super) fn attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    n_heads: usize,
) -> (Tensor<T>, Vec<Tensor<T>>) {
    let n = q.rows();
    let e = q.cols();
    let hd = e / n_heads;
    let inv_sqrt = T::from_f64(1.0 / (hd as f64).sqrt());
    let mut ctx = Tensor::zeros(n, e);
    let mut probs = Vec::with_capacity(n_heads);
    let mut scores = vec![T::ZERO; n];
    for h in 0..n_heads {
        let base = h * hd;
        let mut p = Tensor::zeros(n, n);
        for t in 0..n {
            // scores over keys 0..=t
            let q_row = &q.row(t)[base..base + hd];
            let mut max = T::from_f64(f64::NEG_INFINITY);
            for (j, slot) in scores.iter_mut().enumerate().take(t + 1) {
                let k_row = &k.row(j)[base..base + hd];
                let mut acc = T::ZERO;
                for (a, b) in q_row.iter().zip(k_row) {
                    acc += *a * *b;
                }
                let s = acc * inv_sqrt;
                *slot = s;
                if s > max {
                    max = s;
                }
            }
            let mut z = T::ZERO;
            for s in scores.iter_mut().take(t + 1) {
                *s = (*s - max).exp();
                z += *s;
            }
            let p_row = p.row_mut(t);
            for (j, s) in scores.iter().enumerate().take(t + 1) {
                p_row[j] = *s / z;
            }
            // weighted sum of value rows
            let ctx_row = ctx.row_mut(t);
            for j in 0..=t {
                let w = p_row[j];
                let v_row = &v.row(j)[base..base + hd];
                for (c, vv) in v_row.iter().enumerate() {
                    ctx_row[base + c] += w * *vv;
                }
            }
        }
        probs.push(p);
    }
    (ctx, probs)
}

pub(super) fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for t in 0..x.rows() {
        for c in 0..x.cols() {
            let v = x.at(t, c);
            out.set(t, c, if v > T::ZERO { v } else { T::ZERO });
        }
    }
    out
}

pub(super) fn sigmoid<T: Real>(v: T) -> T {
    T::ONE / (T::ONE + (-v).exp())
}

#[derive(Debug, Clone)]
pub(super) struct BlockTape<T> {
    pub x_in: Tensor<T>,
    /// Attention-branch input actually fed to the projections.
    pub a1: Tensor<T>,
    pub ln1_inv: Option<Vec<T>>,
    pub psi_q: Option<PsiCache<T>>,
    pub psi_k: Option<PsiCache<T>>,
    pub psi_v: Option<PsiCache<T>>,
    /// q/k before per-head normalization (qknorm scheme only).
    pub q_pre: Option<Tensor<T>>,
    pub k_pre: Option<Tensor<T>>,
    pub q_shat: Option<Vec<T>>,
    pub k_shat: Option<Vec<T>>,
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    pub att_p: Vec<Tensor<T>>,
    pub ctx: Tensor<T>,
    pub psi_o: Option<PsiCache<T>>,
    pub x_mid: Tensor<T>,
    /// FFN-branch input fed to w1/w3.
    pub a2: Tensor<T>,
    pub ln2_inv: Option<Vec<T>>,
    pub psi_w1: Option<PsiCache<T>>,
    pub psi_w3: Option<PsiCache<T>>,
    pub psi_w2: Option<PsiCache<T>>,
    pub h1: Tensor<T>,
    pub h3: Option<Tensor<T>>,
    pub act: Tensor<T>,
}

#[derive(Debug, Clone)]
pub(super) struct Tape<T> {
    pub blocks: Vec<BlockTape<T>>,
    /// Stream entering the final norm (or the head when final_norm is off).
    pub x_pre_final: Tensor<T>,
    pub final_inv: Option<Vec<T>>,
    pub x_final: Tensor<T>,
    pub logits: Tensor<T>,
}

pub(super) fn forward_tape<T: Real>(
    model: &ModelState<T>,
    tokens: &[usize],
    mut probe: Option<&mut ActivationProbe>,
) -> Result<Tape<T>> {
    let cfg = &model.cfg;
    if tokens.is_empty() {
        return Err(Error::Data("empty token sequence".into()));
    }
    if tokens.len() > cfg.seq_len {
        return Err(Error::Data(format!(
            "sequence length {} exceeds seq_len {}",
            tokens.len(),
            cfg.seq_len
        )));
    }
    for (position, &token) in tokens.iter().enumerate() {
        if token >= cfg.vocab {
            return Err(Error::TokenOutOfRange {
                token,
                position,
                vocab: cfg.vocab,
            });
        }
    }

    let n = tokens.len();
    let e = cfg.dim;
    let p = &model.params;
    let layout = &model.layout;

    let mut x = Tensor::zeros(n, e);
    for (t, &tok) in tokens.iter().enumerate() {
        let emb = &p[layout.tok_emb + tok * e..layout.tok_emb + (tok + 1) * e];
        let pos = &p[layout.pos_emb + t * e..layout.pos_emb + (t + 1) * e];
        let row = x.row_mut(t);
        for c in 0..e {
            row[c] = emb[c] + pos[c];
        }
    }

    let sn = cfg.scheme == Scheme::Simplenorm;
    let qk = cfg.scheme == Scheme::PrenormQknorm;
    let mut blocks = Vec::with_capacity(cfg.n_layers);

    for (i, offs) in layout.blocks.iter().enumerate() {
        let x_in = x;

        // Attention branch
        let (a1, ln1_inv) = if sn {
            (x_in.clone(), None)
        } else {
            let gain = &p[offs.ln1.unwrap()..offs.ln1.unwrap() + e];
            let (out, inv) = rms_apply(gain, &x_in);
            if let Some(pr) = probe.as_deref_mut() {
                pr.record(format!("blocks.{i}.ln1"), &out);
            }
            (out, Some(inv))
        };

        let site = |name: &str,
                        w_off: usize,
                        gamma: Option<usize>,
                        out_dim: usize,
                        input: &Tensor<T>,
                        probe: &mut Option<&mut ActivationProbe>|
         -> (Tensor<T>, Option<PsiCache<T>>) {
            let z = project(p, w_off, out_dim, input.cols(), input);
            if let Some(g_off) = gamma {
                let gamma = &p[g_off..g_off + out_dim];
                let (out, cache) = psi_apply(gamma, z);
                if let Some(pr) = probe.as_deref_mut() {
                    pr.record(format!("blocks.{i}.psi_{name}"), &out);
                }
                (out, Some(cache))
            } else {
                (z, None)
            }
        };

        let (q0, psi_q) = site("q", offs.wq, offs.gamma_q, e, &a1, &mut probe);
        let (k0, psi_k) = site("k", offs.wk, offs.gamma_k, e, &a1, &mut probe);
        let (v0, psi_v) = site("v", offs.wv, offs.gamma_v, e, &a1, &mut probe);

        let (q, k, q_pre, k_pre, q_shat, k_shat) = if qk {
            let qg = &p[offs.q_gain.unwrap()..offs.q_gain.unwrap() + cfg.n_heads];
            let kg = &p[offs.k_gain.unwrap()..offs.k_gain.unwrap() + cfg.n_heads];
            let (qn, qs) = qk_normalize(&q0, qg, cfg.n_heads);
            let (kn, ks) = qk_normalize(&k0, kg, cfg.n_heads);
            (qn, kn, Some(q0), Some(k0), Some(qs), Some(ks))
        } else {
            (q0, k0, None, None, None, None)
        };

        let (ctx, att_p) = attention(&q, &k, &v0, cfg.n_heads);
        let (o_out, psi_o) = site("o", offs.wo, offs.gamma_o, e, &ctx, &mut probe);

        let mut x_mid = x_in.clone();
        for t in 0..n {
            let row = x_mid.row_mut(t);
            for (c, slot) in row.iter_mut().enumerate() {
                *slot += o_out.at(t, c);
            }
        }

        // FFN branch
        let (a2, ln2_inv) = if sn {
            (x_mid.clone(), None)
        } else {
            let gain = &p[offs.ln2.unwrap()..offs.ln2.unwrap() + e];
            let (out, inv) = rms_apply(gain, &x_mid);
            if let Some(pr) = probe.as_deref_mut() {
                pr.record(format!("blocks.{i}.ln2"), &out);
            }
            (out, Some(inv))
        };

        let (h1, psi_w1) = site("w1", offs.w1, offs.gamma_w1, cfg.ffn_dim, &a2, &mut probe);
        let (h3, psi_w3) = match cfg.ffn_kind {
            FfnKind::Swiglu => {
                let (h3, c) = site(
                    "w3",
                    offs.w3.unwrap(),
                    offs.gamma_w3,
                    cfg.ffn_dim,
                    &a2,
                    &mut probe,
                );
                (Some(h3), c)
            }
            FfnKind::MlpRelu => (None, None),
        };

        let act = match cfg.ffn_kind {
            FfnKind::MlpRelu => relu(&h1),
            FfnKind::Swiglu => {
                let h3 = h3.as_ref().unwrap();
                let mut out = Tensor::zeros(n, cfg.ffn_dim);
                for t in 0..n {
                    for c in 0..cfg.ffn_dim {
                        let a = h1.at(t, c);
                        out.set(t, c, a * sigmoid(a) * h3.at(t, c));
                    }
                }
                out
            }
        };

        let (f_out, psi_w2) = site("w2", offs.w2, offs.gamma_w2, e, &act, &mut probe);

        let mut x_out = x_mid.clone();
        for t in 0..n {
            let row = x_out.row_mut(t);
            for (c, slot) in row.iter_mut().enumerate() {
                *slot += f_out.at(t, c);
            }
        }

        blocks.push(BlockTape {
            x_in,
            a1,
            ln1_inv,
            psi_q,
            psi_k,
            psi_v,
            q_pre,
            k_pre,
            q_shat,
            k_shat,
            q,
            k,
            v: v0,
            att_p,
            ctx,
            psi_o,
            x_mid,
            a2,
            ln2_inv,
            psi_w1,
            psi_w3,
            psi_w2,
            h1,
            h3,
            act,
        });
        x = x_out;
    }

    let x_pre_final = x;
    let (x_final, final_inv) = if let Some(g_off) = layout.final_gain {
        let gain = &p[g_off..g_off + e];
        let (out, inv) = rms_apply(gain, &x_pre_final);
        if let Some(pr) = probe.as_deref_mut() {
            pr.record("final_norm".into(), &out);
        }
        (out, Some(inv))
    } else {
        (x_pre_final.clone(), None)
    };

    let logits = project(p, layout.head, cfg.vocab, e, &x_final);

    Ok(Tape {
        blocks,
        x_pre_final,
        final_inv,
        x_final,
        logits,
    })
}

/// Runs the model over one token sequence.
///
/// Returns logits of shape `(len(tokens), vocab)` and a probe with the
/// per-token output-norm statistics of every normalization site.
pub fn forward<T: Real>(
    model: &ModelState<T>,
    tokens: &[usize],
) -> Result<(Tensor<T>, ActivationProbe)> {
    let mut probe = ActivationProbe::default();
    let tape = forward_tape(model, tokens, Some(&mut probe))?;
    Ok((tape.logits, probe))
}

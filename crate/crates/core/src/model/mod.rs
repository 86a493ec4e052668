//! Desk-scale decoder-only transformer with three switchable block schemes.
//!
//! Schemes:
//! - `prenorm`: RMSNorm before the attention and MLP sublayers, plain
//!   linear projections (the conventional block).
//! - `prenorm_qknorm`: `prenorm` plus per-head RMS normalization of queries
//!   and keys before the attention dot product.
//! - `simplenorm`: no pre-normalization; every linear projection is fused
//!   with an immediate RMS-style normalization onto the sqrt(d) sphere with
//!   a learned gain.
//!
//! Parameters live in one flat buffer described by a [`Layout`] registry so
//! the optimizer, the checkpoint format and the finite-difference gradcheck
//! all address the same storage.

mod backward;
mod forward;

pub(crate) use backward::accumulate_loss_and_grads;
pub use backward::{loss_and_grads, loss_and_grads_captured, SiteCapture, SiteId};
pub use forward::{forward, qknorm_apply};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::RngStream;

/// Epsilon inside the training-path normalization denominator:
/// `sqrt(|z|^2 + EPS^2 * d)`.
pub const NORM_EPS: f64 = 1e-8;

/// Initialization scale for weight matrices.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Prenorm,
    PrenormQknorm,
    Simplenorm,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Prenorm => "prenorm",
            Scheme::PrenormQknorm => "prenorm_qknorm",
            Scheme::Simplenorm => "simplenorm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnKind {
    MlpRelu,
    Swiglu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub dim: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub scheme: Scheme,
    #[serde(default = "default_ffn_kind")]
    pub ffn_kind: FfnKind,
    #[serde(default = "default_final_norm")]
    pub final_norm: bool,
}

fn default_ffn_kind() -> FfnKind {
    FfnKind::MlpRelu
}

fn default_final_norm() -> bool {
    true
}

impl ModelConfig {
    /// Collects every violation instead of stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut violations = Vec::new();
        if self.n_layers == 0 {
            violations.push("n_layers must be >= 1".to_string());
        }
        if self.dim == 0 {
            violations.push("dim must be >= 1".to_string());
        }
        if self.n_heads == 0 {
            violations.push("n_heads must be >= 1".to_string());
        } else if self.dim % self.n_heads != 0 {
            violations.push(format!(
                "dim {} must be divisible by n_heads {}",
                self.dim, self.n_heads
            ));
        }
        if self.ffn_dim == 0 {
            violations.push("ffn_dim must be >= 1".to_string());
        }
        if self.vocab < 2 {
            violations.push("vocab must be >= 2".to_string());
        }
        if self.seq_len == 0 {
            violations.push("seq_len must be >= 1".to_string());
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(violations.join("; ")))
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }
}

/// One named parameter tensor inside the flat buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    /// Weight decay applies only to projection/embedding-style matrices,
    /// never to gains.
    pub decay: bool,
}

/// Offsets of one block's parameters.
#[derive(Debug, Clone)]
pub struct BlockOffsets {
    pub ln1: Option<usize>,
    pub ln2: Option<usize>,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub gamma_q: Option<usize>,
    pub gamma_k: Option<usize>,
    pub gamma_v: Option<usize>,
    pub gamma_o: Option<usize>,
    pub q_gain: Option<usize>,
    pub k_gain: Option<usize>,
    pub w1: usize,
    pub gamma_w1: Option<usize>,
    pub w3: Option<usize>,
    pub gamma_w3: Option<usize>,
    pub w2: usize,
    pub gamma_w2: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub entries: Vec<ParamEntry>,
    pub total: usize,
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub blocks: Vec<BlockOffsets>,
    pub final_gain: Option<usize>,
    pub head: usize,
}

struct LayoutBuilder {
    entries: Vec<ParamEntry>,
    cursor: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, decay: bool) -> usize {
        let len: usize = shape.iter().product();
        let offset = self.cursor;
        self.entries.push(ParamEntry {
            name,
            shape,
            offset,
            len,
            decay,
        });
        self.cursor += len;
        offset
    }
}

impl Layout {
    pub fn build(cfg: &ModelConfig) -> Layout {
        let mut b = LayoutBuilder {
            entries: Vec::new(),
            cursor: 0,
        };
        let e = cfg.dim;
        let f = cfg.ffn_dim;
        let sn = cfg.scheme == Scheme::Simplenorm;
        let qk = cfg.scheme == Scheme::PrenormQknorm;

        let tok_emb = b.push("tok_emb".into(), vec![cfg.vocab, e], false);
        let pos_emb = b.push("pos_emb".into(), vec![cfg.seq_len, e], false);

        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let pre = |s: &str| format!("blocks.{i}.{s}");
            let ln1 = (!sn).then(|| b.push(pre("ln1.gain"), vec![e], false));
            let wq = b.push(pre("attn.wq"), vec![e, e], true);
            let gamma_q = sn.then(|| b.push(pre("attn.wq.gamma"), vec![e], false));
            let wk = b.push(pre("attn.wk"), vec![e, e], true);
            let gamma_k = sn.then(|| b.push(pre("attn.wk.gamma"), vec![e], false));
            let wv = b.push(pre("attn.wv"), vec![e, e], true);
            let gamma_v = sn.then(|| b.push(pre("attn.wv.gamma"), vec![e], false));
            let q_gain = qk.then(|| b.push(pre("attn.q_gain"), vec![cfg.n_heads], false));
            let k_gain = qk.then(|| b.push(pre("attn.k_gain"), vec![cfg.n_heads], false));
            let wo = b.push(pre("attn.wo"), vec![e, e], true);
            let gamma_o = sn.then(|| b.push(pre("attn.wo.gamma"), vec![e], false));
            let ln2 = (!sn).then(|| b.push(pre("ln2.gain"), vec![e], false));
            let w1 = b.push(pre("ffn.w1"), vec![f, e], true);
            let gamma_w1 = sn.then(|| b.push(pre("ffn.w1.gamma"), vec![f], false));
            let w3 = (cfg.ffn_kind == FfnKind::Swiglu)
                .then(|| b.push(pre("ffn.w3"), vec![f, e], true));
            let gamma_w3 = (sn && cfg.ffn_kind == FfnKind::Swiglu)
                .then(|| b.push(pre("ffn.w3.gamma"), vec![f], false));
            let w2 = b.push(pre("ffn.w2"), vec![e, f], true);
            let gamma_w2 = sn.then(|| b.push(pre("ffn.w2.gamma"), vec![e], false));
            blocks.push(BlockOffsets {
                ln1,
                ln2,
                wq,
                wk,
                wv,
                wo,
                gamma_q,
                gamma_k,
                gamma_v,
                gamma_o,
                q_gain,
                k_gain,
                w1,
                gamma_w1,
                w3,
                gamma_w3,
                w2,
                gamma_w2,
            });
        }

        let final_gain = cfg.final_norm.then(|| b.push("final_norm.gain".into(), vec![e], false));
        let head = b.push("head".into(), vec![cfg.vocab, e], true);

        Layout {
            total: b.cursor,
            entries: b.entries,
            tok_emb,
            pos_emb,
            blocks,
            final_gain,
            head,
        }
    }
}

/// Model parameters plus the registry describing them.
#[derive(Debug, Clone)]
pub struct ModelState<T: Real> {
    pub cfg: ModelConfig,
    pub layout: Layout,
    pub params: Vec<T>,
}

impl<T: Real> ModelState<T> {
    pub fn param(&self, offset: usize, len: usize) -> &[T] {
        &self.params[offset..offset + len]
    }

    /// Gains of the named parameter, or an error when absent.
    pub fn entry_by_name(&self, name: &str) -> Option<&ParamEntry> {
        self.layout.entries.iter().find(|e| e.name == name)
    }
}

/// Builds a model with weight matrices drawn from normal(0, 0.02^2) and all
/// gains set to one. The embedding and output head stay plain linear maps in
/// every scheme. Initialization draws in registry order from `rng`, so the
/// parameter stream is identical for f32 and f64 instantiations.
pub fn build_model<T: Real>(cfg: &ModelConfig, rng: &mut RngStream) -> Result<ModelState<T>> {
    cfg.validate()?;
    let layout = Layout::build(cfg);
    let mut params = vec![T::ZERO; layout.total];
    for entry in &layout.entries {
        let slice = &mut params[entry.offset..entry.offset + entry.len];
        if entry.shape.len() == 2 {
            for p in slice.iter_mut() {
                *p = T::from_f64(INIT_STD * rng.next_normal());
            }
        } else {
            for p in slice.iter_mut() {
                *p = T::ONE;
            }
        }
    }
    Ok(ModelState {
        cfg: cfg.clone(),
        layout,
        params,
    })
}

/// Row-major 2-D buffer for activations and logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::ZERO; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }
}

/// Per-site activation statistics from one forward pass. Norms are
/// per-token L2 over the site's output width.
#[derive(Debug, Clone, Serialize)]
pub struct SiteStats {
    pub site: String,
    pub width: usize,
    pub mean_l2: f64,
    pub min_l2: f64,
    pub max_l2: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ActivationProbe {
    pub sites: Vec<SiteStats>,
}

impl ActivationProbe {
    pub(crate) fn record<T: Real>(&mut self, site: String, out: &Tensor<T>) {
        let mut mean = 0.0;
        let mut min = f64::INFINITY;
        let mut max = 0.0_f64;
        for t in 0..out.rows() {
            let n = out
                .row(t)
                .iter()
                .map(|v| {
                    let x = v.to_f64();
                    x * x
                })
                .sum::<f64>()
                .sqrt();
            mean += n;
            min = min.min(n);
            max = max.max(n);
        }
        mean /= out.rows().max(1) as f64;
        self.sites.push(SiteStats {
            site,
            width: out.cols(),
            mean_l2: mean,
            min_l2: min,
            max_l2: max,
        });
    }
}

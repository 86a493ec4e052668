//! Error type shared across the workspace.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid scale: {0}")]
    Scale(String),

    #[error("power iteration did not converge within {max_iter} iterations (last estimate {last_estimate:e})")]
    NoConvergence { max_iter: usize, last_estimate: f64 },

    #[error("non-finite function evaluation during finite differencing (probe {probe})")]
    NonFiniteEval { probe: usize },

    #[error("degenerate input: |Wx| = {norm:e} is below the guard {guard:e}")]
    DegenerateInput { norm: f64, guard: f64 },

    #[error("asymmetric input: {0}")]
    Asymmetric(String),

    #[error("matrix side {side} exceeds the assembly cap {cap}")]
    SizeCap { side: usize, cap: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("token {token} at position {position} is out of range for vocab {vocab}")]
    TokenOutOfRange {
        token: usize,
        position: usize,
        vocab: usize,
    },

    /// Divergence signal from the forward/backward or optimizer path.
    /// This is a result to record, not a crash.
    #[error("non-finite loss: {context}")]
    NonFiniteLoss { context: String },

    #[error("checkpoint format error at offset {offset}: {message}")]
    CheckpointFormat { offset: u64, message: String },

    #[error("checkpoint version {found} unsupported (expected {expected})")]
    CheckpointVersion { found: u8, expected: u8 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

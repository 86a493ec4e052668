//! Command config files: strict UTF-8 JSON, unknown keys rejected.

use serde::Deserialize;
use std::path::{Path, PathBuf};

use snlab_core::model::ModelConfig;
use snlab_core::train::TrainConfig;

/// Parse failure with position diagnostics, or an IO failure. Both are
/// usage errors (exit code 2).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub fn load_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| {
        ConfigError(format!(
            "config {} line {} column {}: {e}",
            path.display(),
            e.line(),
            e.column()
        ))
    })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCliConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: PathBuf,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub resume: Option<PathBuf>,
}

fn default_checkpoint_every() -> u64 {
    100
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepCliConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub schemes: Vec<snlab_core::model::Scheme>,
    pub lr_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub corpus: PathBuf,
}

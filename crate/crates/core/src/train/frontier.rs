//! Learning-rate frontier sweep: trains every (scheme, lr, seed) cell on a
//! fixed step budget and reports, per scheme, the largest grid rate that
//! completed on every seed.

use rayon::prelude::*;
use serde::Serialize;

use super::runner::{train_loop, RunStatus, MODEL_INIT_STREAM};
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{build_model, ModelConfig, Scheme};
use crate::rng::RngStream;

#[derive(Debug, Clone, Serialize)]
pub struct CellSummary {
    pub scheme: Scheme,
    pub lr: f64,
    pub seed: u64,
    pub status: RunStatus,
    pub steps_run: u64,
    /// `None` when the run recorded no finite step (diverged immediately).
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SchemeFrontier {
    pub scheme: Scheme,
    /// Largest grid lr completed by all seeds; `None` when every rate
    /// diverged on some seed.
    pub frontier_lr: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FrontierReport {
    pub cells: Vec<CellSummary>,
    pub frontiers: Vec<SchemeFrontier>,
}

impl FrontierReport {
    pub fn frontier_for(&self, scheme: Scheme) -> Option<f64> {
        self.frontiers
            .iter()
            .find(|f| f.scheme == scheme)
            .and_then(|f| f.frontier_lr)
    }

    /// Flat rows `scheme,lr,seed,step,loss,status` (terminal step and loss
    /// per cell).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scheme,lr,seed,step,loss,status\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                c.scheme.as_str(),
                c.lr,
                c.seed,
                c.steps_run,
                c.final_loss.map_or("nan".into(), |l| l.to_string()),
                c.status
            ));
        }
        out
    }
}

fn run_cell(
    base: &TrainConfig,
    model_cfg: &ModelConfig,
    corpus: &[usize],
    scheme: Scheme,
    lr: f64,
    seed: u64,
) -> Result<CellSummary> {
    let cell_train = TrainConfig {
        peak_lr: lr,
        min_lr: lr / 10.0,
        seed,
        ..base.clone()
    };
    let cell_model_cfg = ModelConfig {
        scheme,
        ..model_cfg.clone()
    };
    let model = build_model::<f32>(&cell_model_cfg, &mut RngStream::new(seed, MODEL_INIT_STREAM))?;
    let run = train_loop(model, corpus, &cell_train)?;
    Ok(CellSummary {
        scheme,
        lr,
        seed,
        status: run.record.status,
        steps_run: run.record.steps.len() as u64,
        initial_loss: run.record.initial_loss(),
        final_loss: run.record.final_loss(),
    })
}

/// Runs the full grid. Cells execute in parallel; each owns its model,
/// optimizer and derived rng streams, and the merged report is ordered
/// (scheme, lr, seed) regardless of scheduling.
pub fn lr_frontier_sweep(
    base: &TrainConfig,
    schemes: &[Scheme],
    lr_grid: &[f64],
    seeds: &[u64],
    model_cfg: &ModelConfig,
    corpus: &[usize],
) -> Result<FrontierReport> {
    base.validate()?;
    model_cfg.validate()?;
    if lr_grid.is_empty() {
        return Err(Error::Config("lr grid must be nonempty".into()));
    }
    if !lr_grid.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Config("lr grid must be sorted ascending".into()));
    }
    if lr_grid.iter().any(|&lr| !(lr > 0.0)) {
        return Err(Error::Config("lr grid entries must be positive".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("seeds must be nonempty".into()));
    }
    if schemes.is_empty() {
        return Err(Error::Config("schemes must be nonempty".into()));
    }

    let cells: Vec<(Scheme, f64, u64)> = schemes
        .iter()
        .flat_map(|&s| {
            lr_grid
                .iter()
                .flat_map(move |&lr| seeds.iter().map(move |&seed| (s, lr, seed)))
        })
        .collect();

    let summaries: Vec<CellSummary> = cells
        .par_iter()
        .map(|&(s, lr, seed)| run_cell(base, model_cfg, corpus, s, lr, seed))
        .collect::<Result<_>>()?;

    let frontiers = schemes
        .iter()
        .map(|&scheme| {
            let frontier_lr = lr_grid
                .iter()
                .rev()
                .find(|&&lr| {
                    seeds.iter().all(|&seed| {
                        summaries
                            .iter()
                            .find(|c| c.scheme == scheme && c.lr == lr && c.seed == seed)
                            .is_some_and(|c| c.status == RunStatus::Completed)
                    })
                })
                .copied();
            SchemeFrontier {
                scheme,
                frontier_lr,
            }
        })
        .collect();

    Ok(FrontierReport {
        cells: summaries,
        frontiers,
    })
}

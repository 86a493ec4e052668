//! One function per subcommand. Each returns the process exit code:
//! 0 success (including a recorded divergence), 1 experiment/assertion
//! failure, 2 usage or config problems.

use std::path::Path;

use serde::Serialize;

use snlab_core::curvature::{
    gn_dominance_sweep, scale_invariance_suite, DominanceConfig, ScaleSuiteConfig,
};
use snlab_core::model::build_model;
use snlab_core::rng::RngStream;
use snlab_core::train::{
    byte_tokenize, checkpoint_load, checkpoint_save, load_corpus, lr_frontier_sweep,
    train_segment, OptimizerState, RunRecord, RunStatus, TrainRun, MODEL_INIT_STREAM,
};
use snlab_core::verify::{run_verification, VerifyConfig};

use crate::config::{load_config, SweepCliConfig, TrainCliConfig};
use crate::Format;

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILED: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

fn ensure_out_dir(out: &Path) -> Result<(), String> {
    std::fs::create_dir_all(out).map_err(|e| format!("cannot create {}: {e}", out.display()))
}

fn write_reports<T: Serialize>(
    out: &Path,
    stem: &str,
    format: Format,
    json_value: &T,
    csv: &str,
) -> Result<(), String> {
    if matches!(format, Format::Json | Format::Both) {
        let path = out.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(json_value)
            .map_err(|e| format!("serialize {stem}: {e}"))?;
        std::fs::write(&path, text).map_err(|e| format!("write {}: {e}", path.display()))?;
    }
    if matches!(format, Format::Csv | Format::Both) {
        let path = out.join(format!("{stem}.csv"));
        std::fs::write(&path, csv).map_err(|e| format!("write {}: {e}", path.display()))?;
    }
    Ok(())
}

pub fn cmd_gradcheck(config: &Path, out: &Path, seed: Option<u64>, format: Format) -> u8 {
    let mut cfg: VerifyConfig = match load_config(config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return EXIT_USAGE;
        }
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Err(e) = ensure_out_dir(out) {
        eprintln!("{e}");
        return EXIT_USAGE;
    }
    let report = match run_verification(&cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("gradcheck failed to run: {e}");
            return EXIT_FAILED;
        }
    };
    for r in &report.identities {
        println!(
            "{} {:18} max_rel_err {:10.3e}  tolerance {:8.1e}  ({} instances)",
            if r.passed { "PASS" } else { "FAIL" },
            r.identity,
            r.max_rel_err,
            r.tolerance,
            r.instances
        );
    }
    if let Err(e) = write_reports(out, "gradcheck_report", format, &report, &report.to_csv()) {
        eprintln!("{e}");
        return EXIT_FAILED;
    }
    if report.all_passed {
        EXIT_OK
    } else {
        EXIT_FAILED
    }
}

pub fn cmd_curvature_dominance(config: &Path, out: &Path, seed: Option<u64>, format: Format) -> u8 {
    let mut cfg: DominanceConfig = match load_config(config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return EXIT_USAGE;
        }
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Err(e) = ensure_out_dir(out) {
        eprintln!("{e}");
        return EXIT_USAGE;
    }
    let report = match gn_dominance_sweep(&cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("dominance sweep failed: {e}");
            return EXIT_FAILED;
        }
    };
    for (d, ratio) in &report.median_ratio_per_dim {
        println!("d = {d:4}  median |C|/|L| = {ratio:.6}");
    }
    println!("log-log slope = {:.4}", report.slope);
    println!(
        "curvature bound holds on {}/{} records",
        report
            .records
            .iter()
            .filter(|r| r.norm_c <= r.bound_rhs)
            .count(),
        report.records.len()
    );
    if let Err(e) = write_reports(out, "dominance_report", format, &report, &report.to_csv()) {
        eprintln!("{e}");
        return EXIT_FAILED;
    }
    if report.bound_holds_everywhere() {
        EXIT_OK
    } else {
        EXIT_FAILED
    }
}

pub fn cmd_curvature_scale(config: &Path, out: &Path, seed: Option<u64>, format: Format) -> u8 {
    let mut cfg: ScaleSuiteConfig = match load_config(config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return EXIT_USAGE;
        }
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Err(e) = ensure_out_dir(out) {
        eprintln!("{e}");
        return EXIT_USAGE;
    }
    let report = match scale_invariance_suite(&cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("scale check failed: {e}");
            return EXIT_FAILED;
        }
    };
    println!("sn_max_rel_dev          = {:e}", report.max_sn_rel_dev);
    println!(
        "lin_quadratic_residual  = {:e}",
        report.max_lin_quadratic_residual
    );
    if let Err(e) = write_reports(out, "scale_report", format, &report, &report.to_csv()) {
        eprintln!("{e}");
        return EXIT_FAILED;
    }
    EXIT_OK
}

pub fn cmd_train(config: &Path, out: &Path, seed: Option<u64>, format: Format) -> u8 {
    let mut cfg: TrainCliConfig = match load_config(config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return EXIT_USAGE;
        }
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Err(e) = cfg.model.validate().and(cfg.train.validate()) {
        eprintln!("invalid config: {e}");
        return EXIT_USAGE;
    }
    if let Err(e) = ensure_out_dir(out) {
        eprintln!("{e}");
        return EXIT_USAGE;
    }
    let corpus = match load_corpus(&cfg.corpus) {
        Ok(c) => byte_tokenize(&c),
        Err(e) => {
            eprintln!("corpus: {e}");
            return EXIT_USAGE;
        }
    };

    let (mut model, mut opt, mut step) = if let Some(resume) = &cfg.resume {
        match checkpoint_load(resume).and_then(|c| c.into_state::<f32>()) {
            Ok(s) => s,
            Err(e) => {
                eprintln!("resume: {e}");
                return EXIT_USAGE;
            }
        }
    } else {
        let model = match build_model::<f32>(
            &cfg.model,
            &mut RngStream::new(cfg.train.seed, MODEL_INIT_STREAM),
        ) {
            Ok(m) => m,
            Err(e) => {
                eprintln!("invalid config: {e}");
                return EXIT_USAGE;
            }
        };
        let opt = OptimizerState::new(model.layout.total);
        (model, opt, 0)
    };

    // Train in checkpoint_every segments so interrupted runs keep the last
    // complete checkpoint.
    let every = cfg.checkpoint_every.max(1);
    let mut record = RunRecord {
        steps: Vec::new(),
        status: RunStatus::Completed,
        w_norm_trace: Vec::new(),
    };
    let mut baseline: Option<f64> = None;
    while step < cfg.train.total_steps {
        let stop = (step + every).min(cfg.train.total_steps);
        let run: TrainRun<f32> =
            match train_segment(model, opt, &corpus, &cfg.train, step, stop, baseline) {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("training failed: {e}");
                    return EXIT_FAILED;
                }
            };
        model = run.model;
        opt = run.opt;
        if baseline.is_none() {
            baseline = run.record.initial_loss();
        }
        record.steps.extend(run.record.steps);
        record.w_norm_trace.extend(run.record.w_norm_trace);
        record.status = run.record.status;
        step = stop;
        if let RunStatus::Diverged { .. } = record.status {
            break;
        }
        let ckpt = out.join(format!("ckpt_{step:08}.snlab"));
        if let Err(e) = checkpoint_save(&model, &opt, step, &ckpt) {
            eprintln!("checkpoint: {e}");
            return EXIT_FAILED;
        }
    }

    println!(
        "status: {} ({} steps, final loss {})",
        record.status,
        record.steps.len(),
        record.final_loss().map_or("n/a".into(), |l| l.to_string())
    );
    let csv = record.to_csv(cfg.model.scheme.as_str(), cfg.train.peak_lr, cfg.train.seed);
    if let Err(e) = write_reports(out, "run_record", format, &record, &csv) {
        eprintln!("{e}");
        return EXIT_FAILED;
    }
    // Divergence is a result, not a failure.
    EXIT_OK
}

pub fn cmd_lr_sweep(config: &Path, out: &Path, seed: Option<u64>, format: Format) -> u8 {
    let mut cfg: SweepCliConfig = match load_config(config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return EXIT_USAGE;
        }
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if cfg.seeds.is_empty() || cfg.lr_grid.is_empty() || cfg.schemes.is_empty() {
        eprintln!("invalid config: schemes, lr_grid and seeds must be nonempty");
        return EXIT_USAGE;
    }
    if let Err(e) = cfg.model.validate().and(cfg.train.validate()) {
        eprintln!("invalid config: {e}");
        return EXIT_USAGE;
    }
    if let Err(e) = ensure_out_dir(out) {
        eprintln!("{e}");
        return EXIT_USAGE;
    }
    let corpus = match load_corpus(&cfg.corpus) {
        Ok(c) => byte_tokenize(&c),
        Err(e) => {
            eprintln!("corpus: {e}");
            return EXIT_USAGE;
        }
    };
    let report = match lr_frontier_sweep(
        &cfg.train,
        &cfg.schemes,
        &cfg.lr_grid,
        &cfg.seeds,
        &cfg.model,
        &corpus,
    ) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("sweep failed: {e}");
            return EXIT_FAILED;
        }
    };
    println!("{:16} frontier_lr", "scheme");
    for f in &report.frontiers {
        println!(
            "{:16} {}",
            f.scheme.as_str(),
            f.frontier_lr.map_or("none".into(), |lr| lr.to_string())
        );
    }
    if let Err(e) = write_reports(out, "frontier_report", format, &report, &report.to_csv()) {
        eprintln!("{e}");
        return EXIT_FAILED;
    }
    EXIT_OK
}

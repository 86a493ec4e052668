//! Acceptance suite. Each test prints one PASS/FAIL line; the whole file is
//! the release gate for the crate.
//!
//! Run with `cargo test -p snlab-core --test acceptance -- --nocapture`.

mod common;

use snlab_core::curvature::{
    gd_descent_probe, gn_dominance_sweep, scale_invariance_suite, DominanceConfig,
    ScaleSuiteConfig,
};
use snlab_core::linalg::Vector;
use snlab_core::model::{build_model, forward, FfnKind, ModelConfig, Scheme};
use snlab_core::rng::RngStream;
use snlab_core::train::{
    byte_tokenize, checkpoint_load, checkpoint_save, load_corpus, lr_frontier_sweep,
    resume_training, train_loop, train_segment, FrontierReport, OptimizerState, RunStatus,
    TrainConfig, MODEL_INIT_STREAM,
};
use snlab_core::verify::{run_verification, VerifyConfig};

fn verdict(criterion: &str, passed: bool, detail: &str) {
    println!(
        "[acceptance] {} {criterion}: {detail}",
        if passed { "PASS" } else { "FAIL" }
    );
    assert!(passed, "{criterion}: {detail}");
}

fn corpus_tokens() -> Vec<usize> {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets/corpus.txt");
    byte_tokenize(&load_corpus(&path).unwrap())
}

// ---------------------------------------------------------------------------
// 1. Derivative identities: all eight analytic derivatives match central
//    finite differences on 100 seeded instances, d,m in {4, 8, 16}, within
//    1e-6 (gradients) / 1e-4 relative Frobenius (Hessians).
// ---------------------------------------------------------------------------
#[test]
fn criterion_1_derivative_identities() {
    let cfg = VerifyConfig::default();
    assert_eq!(cfg.instances, 100);
    assert_eq!(cfg.dims, vec![4, 8, 16]);
    assert_eq!(cfg.grad_tol, 1e-6);
    assert_eq!(cfg.hess_tol, 1e-4);
    let report = run_verification(&cfg).unwrap();
    let worst = report
        .identities
        .iter()
        .map(|r| format!("{} {:.2e}", r.identity, r.max_rel_err))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(
        "criterion 1 (derivative identities)",
        report.all_passed,
        &format!("max relative errors: {worst}"),
    );
}

// ---------------------------------------------------------------------------
// 2. Weight-scale exactness: at d = m = 32 over 20 seeds and
//    alpha in {0.5, 1, 10, 1000}, the normalized Hessian norm moves by at
//    most 1e-8 relatively while the linear Hessian follows alpha^2 within
//    1e-9.
// ---------------------------------------------------------------------------
#[test]
fn criterion_2_scale_invariance() {
    let cfg = ScaleSuiteConfig::default();
    assert_eq!(cfg.dim, 32);
    assert_eq!(cfg.alphas, vec![0.5, 1.0, 10.0, 1000.0]);
    assert_eq!(cfg.n_seeds, 20);
    let report = scale_invariance_suite(&cfg).unwrap();
    let ok =
        report.max_sn_rel_dev <= 1e-8 && report.max_lin_quadratic_residual <= 1e-9;
    verdict(
        "criterion 2 (weight-scale invariance)",
        ok,
        &format!(
            "sn_max_rel_dev {:.2e} (<= 1e-8), lin_quadratic_residual {:.2e} (<= 1e-9)",
            report.max_sn_rel_dev, report.max_lin_quadratic_residual
        ),
    );
}

// ---------------------------------------------------------------------------
// 3. Gauss-Newton dominance: dims {32, 64, 128, 256}, 50 trials each,
//    identity gain, unit-norm loss derivatives. (a) the curvature bound
//    holds on every record, (b) the log-log slope of the median ratio lies
//    in [-0.8, -0.25], (c) median kappa per dim lies in [0.5, 4].
// ---------------------------------------------------------------------------
#[test]
fn criterion_3_gauss_newton_dominance() {
    let cfg = DominanceConfig::default();
    assert_eq!(cfg.dims, vec![32, 64, 128, 256]);
    assert_eq!(cfg.trials_per_dim, 50);
    let report = gn_dominance_sweep(&cfg).unwrap();

    let bound_ok = report.bound_holds_everywhere();
    let slope_ok = (-0.8..=-0.25).contains(&report.slope);
    let mut kappa_ok = true;
    let mut kappa_detail = String::new();
    for &d in &cfg.dims {
        let k = report.median_kappa(d).unwrap();
        kappa_ok &= (0.5..=4.0).contains(&k);
        kappa_detail.push_str(&format!("d={d}: {k:.2}; "));
    }
    // The ratio must also shrink by at least the d^-1/4 factor between the
    // endpoints (theory predicts d^-1/2).
    let median_of = |d: usize| {
        report
            .median_ratio_per_dim
            .iter()
            .find(|&&(dd, _)| dd == d)
            .map(|&(_, r)| r)
            .unwrap()
    };
    let shrink_ok = median_of(256) <= 0.6 * median_of(32);
    verdict(
        "criterion 3 (Gauss-Newton dominance)",
        bound_ok && slope_ok && kappa_ok && shrink_ok,
        &format!(
            "bound {}/{} records, slope {:.3} (in [-0.8, -0.25]), median kappa {}",
            report
                .records
                .iter()
                .filter(|r| r.norm_c <= r.bound_rhs)
                .count(),
            report.records.len(),
            report.slope,
            kappa_detail.trim_end_matches("; ")
        ),
    );
}

// ---------------------------------------------------------------------------
// 4. Activation bound: every normalized-projection site of a 2-layer model,
//    over 64 random sequences, keeps every per-token output norm inside
//    [gamma_min sqrt(d_site), gamma_max sqrt(d_site)] with slack 1e-6.
// ---------------------------------------------------------------------------
#[test]
fn criterion_4_activation_bounds() {
    let cfg = ModelConfig {
        n_layers: 2,
        dim: 64,
        n_heads: 4,
        ffn_dim: 128,
        vocab: 256,
        seq_len: 32,
        scheme: Scheme::Simplenorm,
        ffn_kind: FfnKind::MlpRelu,
        final_norm: true,
    };
    let mut model = build_model::<f64>(&cfg, &mut RngStream::new(77, 0)).unwrap();
    // Non-constant gains make the interval non-degenerate.
    let gamma_entries: Vec<(usize, usize)> = model
        .layout
        .entries
        .iter()
        .filter(|p| p.name.contains(".gamma"))
        .map(|p| (p.offset, p.len))
        .collect();
    let mut grng = RngStream::new(77, 1);
    for (offset, len) in gamma_entries {
        for i in offset..offset + len {
            model.params[i] = grng.uniform(0.5, 1.5);
        }
    }

    let mut worst_violation = 0.0_f64;
    let mut sites_checked = 0usize;
    let mut seq_rng = RngStream::new(77, 2);
    for _ in 0..64 {
        let tokens: Vec<usize> = (0..cfg.seq_len).map(|_| seq_rng.next_index(256)).collect();
        let (_, probe) = forward(&model, &tokens).unwrap();
        for site in &probe.sites {
            let Some((block, kind)) = site.site.rsplit_once(".psi_") else {
                continue;
            };
            let mat = match kind {
                "q" => "attn.wq",
                "k" => "attn.wk",
                "v" => "attn.wv",
                "o" => "attn.wo",
                "w1" => "ffn.w1",
                "w2" => "ffn.w2",
                "w3" => "ffn.w3",
                _ => continue,
            };
            let entry = model
                .entry_by_name(&format!("{block}.{mat}.gamma"))
                .unwrap();
            let gammas = model.param(entry.offset, entry.len);
            let gmin = gammas.iter().cloned().fold(f64::INFINITY, f64::min);
            let gmax = gammas.iter().cloned().fold(0.0_f64, f64::max);
            let sqrt_d = (site.width as f64).sqrt();
            worst_violation = worst_violation
                .max(gmin * sqrt_d - site.min_l2)
                .max(site.max_l2 - gmax * sqrt_d);
            sites_checked += 1;
        }
    }
    verdict(
        "criterion 4 (activation bound)",
        sites_checked == 64 * 12 && worst_violation <= 1e-6,
        &format!("{sites_checked} site records, worst bound violation {worst_violation:.2e} (<= 1e-6)"),
    );
}

// ---------------------------------------------------------------------------
// 5. Stability region: gradient descent on f = beta |x|^2 / 2 descends for
//    eta in {0.5, 1.0, 1.9}/beta and fails to descend for {2.0, 2.5}/beta.
// ---------------------------------------------------------------------------
#[test]
fn criterion_5_stability_region() {
    let beta = 4.0;
    let x0 = Vector::from_slice(&[1.0, -2.0, 0.5]);
    let mut ok = true;
    let mut detail = String::new();
    for factor in [0.5, 1.0, 1.9] {
        let traj = gd_descent_probe(beta, factor / beta, 10, &x0).unwrap();
        let monotone_down =
            traj.windows(2).all(|w| w[1] <= w[0]) && traj[1] < traj[0];
        ok &= monotone_down;
        detail.push_str(&format!("eta={factor}/beta down={monotone_down}; "));
    }
    for factor in [2.0, 2.5] {
        let traj = gd_descent_probe(beta, factor / beta, 10, &x0).unwrap();
        let non_decreasing = traj.windows(2).all(|w| w[1] >= w[0]);
        ok &= non_decreasing;
        detail.push_str(&format!("eta={factor}/beta up={non_decreasing}; "));
    }
    verdict(
        "criterion 5 (stability region)",
        ok,
        detail.trim_end_matches("; "),
    );
}

// ---------------------------------------------------------------------------
// 6. Model gradcheck: micro-models (1 layer, dim 8, vocab 11) for all three
//    schemes, three seeds each; max relative parameter-gradient error vs
//    central differences <= 1e-4 in double precision.
// ---------------------------------------------------------------------------
#[test]
fn criterion_6_model_gradcheck() {
    let mut worst_overall = 0.0_f64;
    let mut detail = String::new();
    for scheme in [Scheme::Prenorm, Scheme::PrenormQknorm, Scheme::Simplenorm] {
        let mut worst = 0.0_f64;
        for seed in 0..3u64 {
            let cfg = ModelConfig {
                n_layers: 1,
                dim: 8,
                n_heads: 2,
                ffn_dim: 16,
                vocab: 11,
                seq_len: 5,
                scheme,
                ffn_kind: FfnKind::MlpRelu,
                final_norm: true,
            };
            let mut model = build_model::<f64>(&cfg, &mut RngStream::new(seed, 0)).unwrap();
            let mut rng = RngStream::new(seed, 100);
            let tokens: Vec<usize> = (0..5).map(|_| rng.next_index(11)).collect();
            let targets: Vec<usize> = (0..5).map(|_| rng.next_index(11)).collect();
            worst = worst.max(common::model_gradcheck(&mut model, &tokens, &targets));
        }
        detail.push_str(&format!("{} {:.2e}; ", scheme.as_str(), worst));
        worst_overall = worst_overall.max(worst);
    }
    verdict(
        "criterion 6 (model gradcheck)",
        worst_overall <= 1e-4,
        &format!(
            "max rel gradient error per scheme: {} (<= 1e-4)",
            detail.trim_end_matches("; ")
        ),
    );
}

// ---------------------------------------------------------------------------
// 7. Training sanity: a one-batch overfit run reaches < 0.1x the initial
//    loss within 200 steps, and a checkpoint cut reproduces the
//    uninterrupted loss trace bitwise.
// ---------------------------------------------------------------------------
#[test]
fn criterion_7_training_sanity() {
    let full_corpus = corpus_tokens();
    let seq_len = 32usize;
    // A corpus with exactly one valid window repeats the same batch forever.
    let data = full_corpus[..seq_len + 2].to_vec();
    let model_cfg = ModelConfig {
        n_layers: 1,
        dim: 64,
        n_heads: 4,
        ffn_dim: 128,
        vocab: 256,
        seq_len,
        scheme: Scheme::Simplenorm,
        ffn_kind: FfnKind::MlpRelu,
        final_norm: true,
    };
    let train_cfg = TrainConfig {
        peak_lr: 1e-3,
        min_lr: 1e-4,
        warmup_steps: 2,
        total_steps: 200,
        batch: 4,
        seq_len,
        seed: 7,
        ..TrainConfig::default()
    };
    let model =
        build_model::<f32>(&model_cfg, &mut RngStream::new(7, MODEL_INIT_STREAM)).unwrap();

    let full = train_loop(model.clone(), &data, &train_cfg).unwrap();
    let initial = full.record.initial_loss().unwrap();
    let final_loss = full.record.final_loss().unwrap();
    let overfit_ok =
        full.record.status == RunStatus::Completed && final_loss < 0.1 * initial;

    // Checkpoint at step 100, resume, compare traces bitwise.
    let dir = tempfile::tempdir().unwrap();
    let leg1 = train_segment(
        model,
        OptimizerState::new(full.model.layout.total),
        &data,
        &train_cfg,
        0,
        100,
        None,
    )
    .unwrap();
    let ckpt = dir.path().join("cut.snlab");
    checkpoint_save(&leg1.model, &leg1.opt, 100, &ckpt).unwrap();
    let (m2, o2, step) = checkpoint_load(&ckpt)
        .unwrap()
        .into_state::<f32>()
        .unwrap();
    let leg2 = resume_training(
        m2,
        o2,
        step,
        &data,
        &train_cfg,
        Some(leg1.record.initial_loss().unwrap()),
    )
    .unwrap();
    let mut resumed: Vec<u64> = leg1.record.steps.iter().map(|s| s.loss.to_bits()).collect();
    resumed.extend(leg2.record.steps.iter().map(|s| s.loss.to_bits()));
    let reference: Vec<u64> = full.record.steps.iter().map(|s| s.loss.to_bits()).collect();
    let resume_ok = resumed == reference;

    verdict(
        "criterion 7 (training sanity)",
        overfit_ok && resume_ok,
        &format!(
            "overfit {initial:.3} -> {final_loss:.3} (target < {:.3}), resume bitwise: {resume_ok}",
            0.1 * initial
        ),
    );
}

// ---------------------------------------------------------------------------
// 8. Learning-rate frontier ordering (statistical): toy config, grid
//    {2e-4, 2e-3, 2e-2, 2e-1}, 3 seeds. The normalized scheme must tolerate
//    at least as much as prenorm+qknorm, which must tolerate at least as
//    much as prenorm, and the normalized frontier must exceed prenorm's by
//    at least one grid step. Seed-sensitive: retried once with 5 seeds.
// ---------------------------------------------------------------------------
#[test]
fn criterion_8_lr_frontier_ordering() {
    let data = corpus_tokens();
    // No final norm here: a trailing RMSNorm caps the logits for every
    // scheme and hides the activation-explosion channel at desk scale. The
    // ablation runs all three schemes on the figure-literal architecture so
    // the placement of normalization is the only variable.
    let model_cfg = ModelConfig {
        n_layers: 2,
        dim: 128,
        n_heads: 4,
        ffn_dim: 256,
        vocab: 256,
        seq_len: 128,
        scheme: Scheme::Prenorm,
        ffn_kind: FfnKind::MlpRelu,
        final_norm: false,
    };
    let train_cfg = TrainConfig {
        total_steps: 500,
        warmup_steps: 5,
        batch: 2,
        seq_len: 128,
        ..TrainConfig::default()
    };
    let grid = [2e-4, 2e-3, 2e-2, 2e-1];
    let schemes = [Scheme::Prenorm, Scheme::PrenormQknorm, Scheme::Simplenorm];

    let evaluate = |report: &FrontierReport| -> (bool, String) {
        let idx = |s: Scheme| -> i64 {
            report
                .frontier_for(s)
                .and_then(|lr| grid.iter().position(|&g| g == lr))
                .map_or(-1, |i| i as i64)
        };
        let pre = idx(Scheme::Prenorm);
        let qk = idx(Scheme::PrenormQknorm);
        let sn = idx(Scheme::Simplenorm);
        let ok = sn >= qk && qk >= pre && sn >= pre + 1;
        let detail = format!(
            "frontier grid index: simplenorm {sn}, prenorm_qknorm {qk}, prenorm {pre} \
             (lr: {:?} / {:?} / {:?})",
            report.frontier_for(Scheme::Simplenorm),
            report.frontier_for(Scheme::PrenormQknorm),
            report.frontier_for(Scheme::Prenorm)
        );
        (ok, detail)
    };

    let report = lr_frontier_sweep(&train_cfg, &schemes, &grid, &[1, 2, 3], &model_cfg, &data)
        .unwrap();
    let (ok, detail) = evaluate(&report);
    if ok {
        verdict("criterion 8 (lr frontier ordering)", true, &detail);
        return;
    }
    // Statistical criterion: re-run with 5 seeds before declaring failure.
    println!("[acceptance] criterion 8 retry with 5 seeds ({detail})");
    let report = lr_frontier_sweep(
        &train_cfg,
        &schemes,
        &grid,
        &[1, 2, 3, 4, 5],
        &model_cfg,
        &data,
    )
    .unwrap();
    let (ok, detail) = evaluate(&report);
    verdict("criterion 8 (lr frontier ordering)", ok, &detail);
}

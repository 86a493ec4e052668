//! Model-level checks: gradcheck against finite differences for all three
//! schemes, causal masking, determinism, activation bounds, and the
//! cross-check of the fused-normalization backward against the operator
//! module's closed form.

mod common;

use snlab_core::linalg::{Matrix, Vector};
use snlab_core::model::{
    build_model, forward, loss_and_grads, loss_and_grads_captured, qknorm_apply, FfnKind,
    ModelConfig, ModelState, Scheme, SiteId, Tensor,
};
use snlab_core::rng::RngStream;
use snlab_core::simplenorm::{sn_forward, sn_grad_x, SimpleNormParams};
use snlab_core::Error;

fn micro_cfg(scheme: Scheme) -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        dim: 8,
        n_heads: 2,
        ffn_dim: 16,
        vocab: 11,
        seq_len: 5,
        scheme,
        ffn_kind: FfnKind::MlpRelu,
        final_norm: true,
    }
}

fn micro_tokens(seed: u64, vocab: usize, len: usize) -> (Vec<usize>, Vec<usize>) {
    let mut rng = RngStream::new(seed, 100);
    let tokens: Vec<usize> = (0..len).map(|_| rng.next_index(vocab)).collect();
    let targets: Vec<usize> = (0..len).map(|_| rng.next_index(vocab)).collect();
    (tokens, targets)
}

#[test]
fn gradcheck_all_schemes() {
    for scheme in [Scheme::Prenorm, Scheme::PrenormQknorm, Scheme::Simplenorm] {
        for seed in 0..3u64 {
            let cfg = micro_cfg(scheme);
            let mut model = build_model::<f64>(&cfg, &mut RngStream::new(seed, 0)).unwrap();
            let (tokens, targets) = micro_tokens(seed, cfg.vocab, 5);
            let worst = common::model_gradcheck(&mut model, &tokens, &targets);
            assert!(
                worst <= 1e-4,
                "{scheme:?} seed {seed}: max rel gradient error {worst:e}"
            );
        }
    }
}

#[test]
fn gradcheck_swiglu_variant() {
    for scheme in [Scheme::Prenorm, Scheme::Simplenorm] {
        let cfg = ModelConfig {
            ffn_kind: FfnKind::Swiglu,
            ..micro_cfg(scheme)
        };
        let mut model = build_model::<f64>(&cfg, &mut RngStream::new(9, 0)).unwrap();
        let (tokens, targets) = micro_tokens(9, cfg.vocab, 5);
        let worst = common::model_gradcheck(&mut model, &tokens, &targets);
        assert!(worst <= 1e-4, "{scheme:?} swiglu: {worst:e}");
    }
}

#[test]
fn gradcheck_without_final_norm() {
    let cfg = ModelConfig {
        final_norm: false,
        ..micro_cfg(Scheme::Simplenorm)
    };
    let mut model = build_model::<f64>(&cfg, &mut RngStream::new(4, 0)).unwrap();
    let (tokens, targets) = micro_tokens(4, cfg.vocab, 5);
    let worst = common::model_gradcheck(&mut model, &tokens, &targets);
    assert!(worst <= 1e-4, "{worst:e}");
}

#[test]
fn logits_shape_contract() {
    for scheme in [Scheme::Prenorm, Scheme::PrenormQknorm, Scheme::Simplenorm] {
        let cfg = micro_cfg(scheme);
        let model = build_model::<f64>(&cfg, &mut RngStream::new(1, 0)).unwrap();
        let (tokens, _) = micro_tokens(1, cfg.vocab, 4);
        let (logits, _) = forward(&model, &tokens).unwrap();
        assert_eq!(logits.rows(), 4);
        assert_eq!(logits.cols(), cfg.vocab);
    }
}

#[test]
fn fresh_init_loss_is_near_uniform() {
    // Near-uniform logits at small init: mean cross-entropy within 5% of
    // ln(vocab).
    let cfg = ModelConfig {
        vocab: 256,
        seq_len: 32,
        dim: 32,
        n_layers: 2,
        n_heads: 4,
        ffn_dim: 64,
        ..micro_cfg(Scheme::Simplenorm)
    };
    for scheme in [Scheme::Prenorm, Scheme::Simplenorm] {
        let cfg = ModelConfig {
            scheme,
            ..cfg.clone()
        };
        let model = build_model::<f64>(&cfg, &mut RngStream::new(2, 0)).unwrap();
        let (tokens, targets) = micro_tokens(2, cfg.vocab, 32);
        let (loss, _) = loss_and_grads(&model, &tokens, &targets).unwrap();
        let uniform = (cfg.vocab as f64).ln();
        assert!(
            (loss - uniform).abs() / uniform < 0.05,
            "{scheme:?}: loss {loss} vs ln(vocab) {uniform}"
        );
    }
}

#[test]
fn causal_masking_is_exact() {
    for scheme in [Scheme::Prenorm, Scheme::PrenormQknorm, Scheme::Simplenorm] {
        let cfg = micro_cfg(scheme);
        let model = build_model::<f64>(&cfg, &mut RngStream::new(3, 0)).unwrap();
        let tokens = vec![1, 4, 7, 2, 9];
        let (base, _) = forward(&model, &tokens).unwrap();
        let mut mutated = tokens.clone();
        mutated[3] = 10;
        mutated[4] = 0;
        let (changed, _) = forward(&model, &mutated).unwrap();
        for t in 0..3 {
            for c in 0..cfg.vocab {
                assert_eq!(
                    base.at(t, c).to_bits(),
                    changed.at(t, c).to_bits(),
                    "{scheme:?}: logit ({t},{c}) changed by a future token"
                );
            }
        }
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let cfg = micro_cfg(Scheme::Simplenorm);
    let m1 = build_model::<f32>(&cfg, &mut RngStream::new(8, 0)).unwrap();
    let m2 = build_model::<f32>(&cfg, &mut RngStream::new(8, 0)).unwrap();
    let tokens = vec![3, 1, 4, 1, 5];
    let (l1, _) = forward(&m1, &tokens).unwrap();
    let (l2, _) = forward(&m2, &tokens).unwrap();
    for (a, b) in l1.data().iter().zip(l2.data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn token_out_of_range_and_empty_inputs_error() {
    let cfg = micro_cfg(Scheme::Prenorm);
    let model = build_model::<f64>(&cfg, &mut RngStream::new(1, 0)).unwrap();
    assert!(matches!(
        forward(&model, &[0, 11]),
        Err(Error::TokenOutOfRange { token: 11, .. })
    ));
    assert!(matches!(forward(&model, &[]), Err(Error::Data(_))));
    assert!(matches!(
        loss_and_grads(&model, &[], &[]),
        Err(Error::Data(_))
    ));
    assert!(loss_and_grads(&model, &[1, 2], &[3]).is_err());
}

fn randomize_gammas(model: &mut ModelState<f64>, seed: u64) {
    let mut rng = RngStream::new(seed, 200);
    let gamma_entries: Vec<(usize, usize)> = model
        .layout
        .entries
        .iter()
        .filter(|p| p.name.contains(".gamma"))
        .map(|p| (p.offset, p.len))
        .collect();
    for (offset, len) in gamma_entries {
        for i in offset..offset + len {
            model.params[i] = rng.uniform(0.5, 1.5);
        }
    }
}

/// Map from a probe site name to the gain parameter that bounds it.
fn gamma_name_for_site(site: &str) -> Option<String> {
    let (block, kind) = site.rsplit_once(".psi_")?;
    let mat = match kind {
        "q" => "attn.wq",
        "k" => "attn.wk",
        "v" => "attn.wv",
        "o" => "attn.wo",
        "w1" => "ffn.w1",
        "w2" => "ffn.w2",
        "w3" => "ffn.w3",
        _ => return None,
    };
    Some(format!("{block}.{mat}.gamma"))
}

#[test]
fn simplenorm_sites_respect_activation_bounds() {
    let cfg = ModelConfig {
        n_layers: 2,
        dim: 32,
        n_heads: 4,
        ffn_dim: 64,
        vocab: 256,
        seq_len: 24,
        scheme: Scheme::Simplenorm,
        ffn_kind: FfnKind::MlpRelu,
        final_norm: true,
    };
    let mut model = build_model::<f64>(&cfg, &mut RngStream::new(21, 0)).unwrap();
    randomize_gammas(&mut model, 21);
    let (tokens, _) = micro_tokens(21, cfg.vocab, 24);
    let (_, probe) = forward(&model, &tokens).unwrap();
    let mut checked = 0;
    for site in &probe.sites {
        let Some(gamma_name) = gamma_name_for_site(&site.site) else {
            continue;
        };
        let entry = model.entry_by_name(&gamma_name).expect("gamma exists");
        let gammas = model.param(entry.offset, entry.len);
        let gmin = gammas.iter().cloned().fold(f64::INFINITY, f64::min);
        let gmax = gammas.iter().cloned().fold(0.0_f64, f64::max);
        let sqrt_d = (site.width as f64).sqrt();
        assert!(
            site.min_l2 >= gmin * sqrt_d - 1e-6,
            "{}: min norm {} below {}",
            site.site,
            site.min_l2,
            gmin * sqrt_d
        );
        assert!(
            site.max_l2 <= gmax * sqrt_d + 1e-6,
            "{}: max norm {} above {}",
            site.site,
            site.max_l2,
            gmax * sqrt_d
        );
        checked += 1;
    }
    assert_eq!(checked, 2 * 6, "expected six bounded sites per layer");
}

#[test]
fn site_backward_matches_operator_gradient() {
    // The fused-projection input gradient inside the model must agree with
    // the operator module's closed form, per token.
    let cfg = micro_cfg(Scheme::Simplenorm);
    let model = build_model::<f64>(&cfg, &mut RngStream::new(31, 0)).unwrap();
    let (tokens, targets) = micro_tokens(31, cfg.vocab, 5);
    for (site, mat, gamma) in [
        (SiteId::Q, "blocks.0.attn.wq", "blocks.0.attn.wq.gamma"),
        (SiteId::W2, "blocks.0.ffn.w2", "blocks.0.ffn.w2.gamma"),
    ] {
        for token in [0usize, 3] {
            let (_, _, cap) =
                loss_and_grads_captured(&model, &tokens, &targets, 0, site, token).unwrap();
            let w_entry = model.entry_by_name(mat).unwrap();
            let g_entry = model.entry_by_name(gamma).unwrap();
            let (rows, cols) = (w_entry.shape[0], w_entry.shape[1]);
            let w = Matrix::from_vec(
                rows,
                cols,
                model.param(w_entry.offset, w_entry.len).to_vec(),
            )
            .unwrap();
            let g = Vector::from_slice(model.param(g_entry.offset, g_entry.len));
            let params = SimpleNormParams::new(w, g).unwrap();
            let x = Vector::from_slice(&cap.input);
            let g_y = Vector::from_slice(&cap.upstream);
            let (_, cache) = sn_forward(&params, &x).unwrap();
            let expected = sn_grad_x(&params, &cache, &g_y).unwrap();
            let got = Vector::from_slice(&cap.input_grad);
            let rel = got.sub(&expected).norm() / expected.norm().max(1e-12);
            assert!(rel < 1e-6, "{site:?} token {token}: rel {rel}");
        }
    }
}

#[test]
fn qknorm_semantics() {
    // Post-norm per-head L2 = sqrt(head_dim) * gain; unit-gain fixed point
    // for vectors already on that sphere.
    let n_heads = 2;
    let hd = 4;
    let mut rng = RngStream::new(17, 0);
    let mut q = Tensor::<f64>::zeros(3, n_heads * hd);
    let mut k = Tensor::<f64>::zeros(3, n_heads * hd);
    for t in 0..3 {
        for c in 0..n_heads * hd {
            q.set(t, c, rng.next_normal());
            k.set(t, c, rng.next_normal());
        }
    }
    let q_gains = [1.3, 0.8];
    let k_gains = [1.0, 1.0];
    let (qn, _kn) = qknorm_apply(&q, &k, &q_gains, &k_gains, n_heads).unwrap();
    for t in 0..3 {
        for h in 0..n_heads {
            let norm: f64 = qn.row(t)[h * hd..(h + 1) * hd]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            let expected = (hd as f64).sqrt() * q_gains[h];
            assert!((norm - expected).abs() < 1e-6, "head {h}: {norm}");
        }
    }
    // fixed point: rows of k already at norm sqrt(hd) with gain 1
    let mut k_fixed = Tensor::<f64>::zeros(2, n_heads * hd);
    for t in 0..2 {
        for h in 0..n_heads {
            let mut row = vec![0.0; hd];
            for (c, slot) in row.iter_mut().enumerate() {
                *slot = rng.next_normal() + 0.1 * c as f64;
            }
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            for c in 0..hd {
                k_fixed.set(t, h * hd + c, row[c] / norm * (hd as f64).sqrt());
            }
        }
    }
    let (fixed, _) = qknorm_apply(&k_fixed, &k_fixed, &k_gains, &k_gains, n_heads).unwrap();
    for t in 0..2 {
        for c in 0..n_heads * hd {
            assert!((fixed.at(t, c) - k_fixed.at(t, c)).abs() < 1e-7);
        }
    }
}

#[test]
fn prenorm_has_two_norm_sites_per_block() {
    let cfg = micro_cfg(Scheme::Prenorm);
    let model = build_model::<f64>(&cfg, &mut RngStream::new(2, 0)).unwrap();
    let (tokens, _) = micro_tokens(2, cfg.vocab, 5);
    let (_, probe) = forward(&model, &tokens).unwrap();
    let ln_sites = probe
        .sites
        .iter()
        .filter(|s| s.site.contains(".ln"))
        .count();
    assert_eq!(ln_sites, 2 * cfg.n_layers);
}

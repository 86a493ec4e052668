//! Curvature experiments: Gauss-Newton dominance, weight-scale invariance,
//! and the gradient-descent stability region.
//!
//! These routines measure, at experiment scale, the two structural claims
//! about the normalized-linear operator: the curvature term induced by the
//! normalization shrinks relative to the Gauss-Newton term as the dimension
//! grows, and the total input Hessian is invariant to the weight scale while
//! the plain linear map's Hessian grows quadratically with it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, unit_vector, Matrix, Vector};
use crate::quadratic::QuadraticLoss;
use crate::rng::RngStream;
use crate::spectral::spectral_norm_fixed;
use crate::simplenorm::{sn_forward, sn_hessian_x, SimpleNormParams};

/// Largest dimension for which the full dense Hessian is assembled.
pub const MAX_SWEEP_DIM: usize = 512;

/// Scale factor `kappa = sqrt(d) |W|_2 / |W x|_2`.
pub fn kappa(w: &Matrix, x: &Vector) -> Result<f64> {
    let wx = w.matvec(x)?;
    let s = wx.norm();
    if s == 0.0 {
        return Err(Error::DegenerateInput {
            norm: s,
            guard: 0.0,
        });
    }
    let sigma = spectral_norm_fixed(w)?;
    Ok((w.rows() as f64).sqrt() * sigma / s)
}

/// Effective rank `|W|_F^2 / |W|_2^2`.
pub fn effective_rank(w: &Matrix) -> Result<f64> {
    let sigma = spectral_norm_fixed(w)?;
    if sigma == 0.0 {
        return Err(Error::Domain("effective rank of the zero matrix".into()));
    }
    let f = w.frobenius_norm();
    Ok((f * f) / (sigma * sigma))
}

/// Alignment factor `tau = |W~^T P H_yy P W~|_2 / |H_yy|_2` with
/// `W~ = W / |W|_2` and `P = I - u u^T` at `u = W x / |W x|`.
/// Lies in `[0, 1]` up to roundoff.
pub fn tau(w: &Matrix, x: &Vector, h_yy: &Matrix) -> Result<f64> {
    if h_yy.rows() != w.rows() || h_yy.rows() != h_yy.cols() {
        return Err(Error::Shape("H_yy must be square and match W rows".into()));
    }
    let wx = w.matvec(x)?;
    let s = wx.norm();
    if s == 0.0 {
        return Err(Error::DegenerateInput {
            norm: s,
            guard: 0.0,
        });
    }
    let h_norm = spectral_norm_fixed(h_yy)?;
    if h_norm == 0.0 {
        return Err(Error::Domain("tau of a zero H_yy".into()));
    }
    let sigma = spectral_norm_fixed(w)?;
    let w_tilde = w.scale(1.0 / sigma);
    let u = wx.scale(1.0 / s);
    // P M: subtract u (u^T M) without materializing P.
    let pw = project_out(&w_tilde, &u);
    let mid = pw.transpose().matmul(&h_yy.matmul(&pw)?)?;
    Ok(spectral_norm_fixed(&mid)? / h_norm)
}

/// `(I - u u^T) M` for unit `u`.
fn project_out(m: &Matrix, u: &Vector) -> Matrix {
    let ut_m = m.matvec_t(u).expect("u matches m rows");
    let mut out = m.clone();
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            out.set(i, j, m.at(i, j) - u[i] * ut_m[j]);
        }
    }
    out
}

/// Maximum tolerable gradient-descent learning rate `2 / beta` for a
/// beta-smooth objective.
pub fn max_stable_lr(beta: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::Domain(format!(
            "smoothness constant must be positive, got {beta}"
        )));
    }
    Ok(2.0 / beta)
}

/// Gradient descent on `f(x) = beta |x|^2 / 2`; returns the objective
/// trajectory including the starting value. The iterate contracts by
/// `(1 - eta beta)` per step, so the 2/beta threshold is visible exactly.
pub fn gd_descent_probe(beta: f64, eta: f64, steps: usize, x0: &Vector) -> Result<Vec<f64>> {
    if !(beta > 0.0) || !(eta > 0.0) {
        return Err(Error::Domain(format!(
            "gd probe needs positive beta and eta, got beta={beta} eta={eta}"
        )));
    }
    if steps == 0 {
        return Err(Error::Domain("gd probe needs at least one step".into()));
    }
    let factor = 1.0 - eta * beta;
    let mut x = x0.clone();
    let f = |v: &Vector| 0.5 * beta * v.dot(v);
    let mut trajectory = Vec::with_capacity(steps + 1);
    trajectory.push(f(&x));
    for _ in 0..steps {
        x = x.scale(factor);
        trajectory.push(f(&x));
    }
    Ok(trajectory)
}

/// Spectrum descriptor for the test-loss Hessian.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum LossSpectrum {
    /// Eigenvalues log-uniform on `[min, max]`, rescaled to unit spectral
    /// norm, with a random orthogonal eigenbasis.
    LogUniform { min: f64, max: f64 },
}

impl Default for LossSpectrum {
    fn default() -> Self {
        Self::LogUniform {
            min: 1e-2,
            max: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DominanceConfig {
    pub dims: Vec<usize>,
    pub trials_per_dim: usize,
    pub w_scale: f64,
    pub seed: u64,
    pub loss_spec: LossSpectrum,
}

impl Default for DominanceConfig {
    fn default() -> Self {
        Self {
            dims: vec![32, 64, 128, 256],
            trials_per_dim: 50,
            w_scale: 1.0,
            seed: 42,
            loss_spec: LossSpectrum::default(),
        }
    }
}

impl DominanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::Config("dominance sweep needs at least one dim".into()));
        }
        if !self.dims.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("dims must be strictly increasing".into()));
        }
        if let Some(&d) = self.dims.iter().find(|&&d| d > MAX_SWEEP_DIM) {
            return Err(Error::SizeCap {
                side: d,
                cap: MAX_SWEEP_DIM,
            });
        }
        if self.trials_per_dim == 0 {
            return Err(Error::Config("trials_per_dim must be >= 1".into()));
        }
        if !(self.w_scale > 0.0) {
            return Err(Error::Config("w_scale must be positive".into()));
        }
        Ok(())
    }
}

/// One trial of the dominance sweep.
#[derive(Debug, Clone, Serialize)]
pub struct DominanceRecord {
    pub d: usize,
    pub trial: usize,
    pub norm_l: f64,
    pub norm_c: f64,
    pub ratio: f64,
    pub kappa: f64,
    pub tau: f64,
    pub eff_rank: f64,
    /// `3 kappa^2 |g_y| / sqrt(d)` — the proven ceiling for `|C|_2`.
    pub bound_rhs: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CurvatureReport {
    pub records: Vec<DominanceRecord>,
    /// `(d, median of norm_C / norm_L over trials)`
    pub median_ratio_per_dim: Vec<(usize, f64)>,
    /// Least-squares slope of `log(median ratio)` against `log(d)`.
    pub slope: f64,
}

impl CurvatureReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("d,trial,norm_L,norm_C,ratio,kappa,tau,eff_rank,bound_rhs\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.d, r.trial, r.norm_l, r.norm_c, r.ratio, r.kappa, r.tau, r.eff_rank, r.bound_rhs
            ));
        }
        out
    }

    /// True when every record satisfies the curvature bound.
    pub fn bound_holds_everywhere(&self) -> bool {
        self.records.iter().all(|r| r.norm_c <= r.bound_rhs)
    }

    pub fn median_kappa(&self, d: usize) -> Option<f64> {
        let mut v: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.d == d)
            .map(|r| r.kappa)
            .collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(|a, b| a.total_cmp(b));
        Some(median_sorted(&v))
    }
}

fn median_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn dominance_trial(cfg: &DominanceConfig, d: usize, trial: usize) -> Result<DominanceRecord> {
    // One stream per (d, trial) cell so trials parallelize deterministically.
    let mut rng = RngStream::new(cfg.seed, (d as u64) * 1_000_000 + trial as u64);

    let w = gaussian_matrix(d, d, cfg.w_scale / (d as f64).sqrt(), &mut rng)?;
    let x = unit_vector(d, &mut rng)?.scale((d as f64).sqrt());
    let params = SimpleNormParams::new(w.clone(), Vector::ones(d))?;
    let (y, cache) = sn_forward(&params, &x)?;

    let LossSpectrum::LogUniform { min, max } = cfg.loss_spec;
    let a = QuadraticLoss::spectrum_log_uniform(d, min, max, &mut rng)?;
    let g_dir = unit_vector(d, &mut rng)?;
    let loss = QuadraticLoss::with_gradient_at(a, &y, &g_dir)?;
    let g_y = loss.grad(&y);
    let h_yy = loss.hessian();

    let split = sn_hessian_x(&params, &cache, &g_y, h_yy)?;
    let norm_l = spectral_norm_fixed(&split.gauss_newton)?;
    let norm_c = spectral_norm_fixed(&split.curvature)?;

    let kappa_v = kappa(&w, &x)?;
    let tau_v = tau(&w, &x, h_yy)?;
    let eff_rank_v = effective_rank(&w)?;
    let g_norm = g_y.norm();

    Ok(DominanceRecord {
        d,
        trial,
        norm_l,
        norm_c,
        ratio: norm_c / norm_l,
        kappa: kappa_v,
        tau: tau_v,
        eff_rank: eff_rank_v,
        bound_rhs: 3.0 * kappa_v * kappa_v * g_norm / (d as f64).sqrt(),
    })
}

/// Sweeps the Gauss-Newton / curvature ratio over dimensions.
///
/// Per `(d, trial)`: `W` has i.i.d. normal(0, w_scale^2/d) entries, the input
/// is `sqrt(d)` times a uniform unit vector, the loss Hessian has unit
/// spectral norm and the gradient at the operating point has unit norm, so
/// the dominance ratio isolates the dimension dependence.
pub fn gn_dominance_sweep(cfg: &DominanceConfig) -> Result<CurvatureReport> {
    cfg.validate()?;
    let cells: Vec<(usize, usize)> = cfg
        .dims
        .iter()
        .flat_map(|&d| (0..cfg.trials_per_dim).map(move |t| (d, t)))
        .collect();
    let records: Vec<DominanceRecord> = cells
        .par_iter()
        .map(|&(d, t)| dominance_trial(cfg, d, t))
        .collect::<Result<_>>()?;

    let mut median_ratio_per_dim = Vec::with_capacity(cfg.dims.len());
    for &d in &cfg.dims {
        let mut ratios: Vec<f64> = records
            .iter()
            .filter(|r| r.d == d)
            .map(|r| r.ratio)
            .collect();
        ratios.sort_by(|a, b| a.total_cmp(b));
        median_ratio_per_dim.push((d, median_sorted(&ratios)));
    }

    let slope = log_log_slope(&median_ratio_per_dim);
    Ok(CurvatureReport {
        records,
        median_ratio_per_dim,
        slope,
    })
}

fn log_log_slope(points: &[(usize, f64)]) -> f64 {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|&(d, _)| (d as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, r)| r.ln()).collect();
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        num += (x - mean_x) * (y - mean_y);
        den += (x - mean_x) * (x - mean_x);
    }
    num / den
}

#[derive(Debug, Clone, Serialize)]
pub struct ScaleReport {
    pub alphas: Vec<f64>,
    /// `|L(alpha W) + C(alpha W)|_2` at the loss derivatives of the
    /// unchanged output.
    pub sn_norms: Vec<f64>,
    /// `|(alpha W)^T H_yy (alpha W)|_2`.
    pub lin_norms: Vec<f64>,
    pub sn_max_rel_dev: f64,
    pub lin_quadratic_residual: f64,
    /// Empirical visibility `|W~^T H_yy W~|_2 / |H_yy|_2` at the reference
    /// scale; reported, not asserted.
    pub lin_visibility: f64,
}

impl ScaleReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,sn_norm,lin_norm\n");
        for i in 0..self.alphas.len() {
            out.push_str(&format!(
                "{},{},{}\n",
                self.alphas[i], self.sn_norms[i], self.lin_norms[i]
            ));
        }
        out
    }
}

/// Rescales the weight by each `alpha` and compares the two Hessians.
///
/// The operator output is invariant to the weight scale, so the loss
/// derivatives are evaluated once at the reference output and reused; the
/// normalized Hessian should not move while the linear one grows as
/// `alpha^2`.
pub fn scale_invariance_check(
    w: &Matrix,
    x: &Vector,
    gamma: &Vector,
    loss: &QuadraticLoss,
    alphas: &[f64],
) -> Result<ScaleReport> {
    if alphas.is_empty() {
        return Err(Error::Config("alphas must be nonempty".into()));
    }
    if alphas.iter().any(|&a| !(a > 0.0)) {
        return Err(Error::Config("alphas must all be positive".into()));
    }
    let reference = alphas
        .iter()
        .position(|&a| a == 1.0)
        .ok_or_else(|| Error::Config("alphas must contain 1".into()))?;

    let params = SimpleNormParams::new(w.clone(), gamma.clone())?;
    let (y_ref, _) = sn_forward(&params, x)?;
    let g_y = loss.grad(&y_ref);
    let h_yy = loss.hessian();

    let mut sn_norms = Vec::with_capacity(alphas.len());
    let mut lin_norms = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let scaled = params.scaled_weight(alpha);
        let (_, cache) = sn_forward(&scaled, x)?;
        let split = sn_hessian_x(&scaled, &cache, &g_y, h_yy)?;
        sn_norms.push(spectral_norm_fixed(&split.total())?);

        let wa = w.scale(alpha);
        let lin = wa.transpose().matmul(&h_yy.matmul(&wa)?)?;
        lin_norms.push(spectral_norm_fixed(&lin)?);
    }

    let sn_ref = sn_norms[reference];
    let lin_ref = lin_norms[reference];
    let mut sn_max_rel_dev = 0.0_f64;
    let mut lin_quadratic_residual = 0.0_f64;
    for (i, &alpha) in alphas.iter().enumerate() {
        sn_max_rel_dev = sn_max_rel_dev.max((sn_norms[i] / sn_ref - 1.0).abs());
        lin_quadratic_residual =
            lin_quadratic_residual.max((lin_norms[i] / (alpha * alpha * lin_ref) - 1.0).abs());
    }

    let sigma_w = spectral_norm_fixed(w)?;
    let w_tilde = w.scale(1.0 / sigma_w);
    let mid = w_tilde.transpose().matmul(&h_yy.matmul(&w_tilde)?)?;
    let lin_visibility = spectral_norm_fixed(&mid)? / spectral_norm_fixed(h_yy)?;

    Ok(ScaleReport {
        alphas: alphas.to_vec(),
        sn_norms,
        lin_norms,
        sn_max_rel_dev,
        lin_quadratic_residual,
        lin_visibility,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScaleSuiteConfig {
    pub dim: usize,
    pub alphas: Vec<f64>,
    pub n_seeds: u64,
    pub seed: u64,
}

impl Default for ScaleSuiteConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            alphas: vec![0.5, 1.0, 10.0, 1000.0],
            n_seeds: 20,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ScaleSuiteReport {
    pub per_seed: Vec<ScaleReport>,
    pub max_sn_rel_dev: f64,
    pub max_lin_quadratic_residual: f64,
}

impl ScaleSuiteReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,alpha,sn_norm,lin_norm\n");
        for (s, report) in self.per_seed.iter().enumerate() {
            for i in 0..report.alphas.len() {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    s, report.alphas[i], report.sn_norms[i], report.lin_norms[i]
                ));
            }
        }
        out
    }
}

/// Runs [`scale_invariance_check`] on `n_seeds` random instances and
/// aggregates the worst deviations.
pub fn scale_invariance_suite(cfg: &ScaleSuiteConfig) -> Result<ScaleSuiteReport> {
    if cfg.dim == 0 {
        return Err(Error::Config("dim must be >= 1".into()));
    }
    if cfg.n_seeds == 0 {
        return Err(Error::Config("n_seeds must be >= 1".into()));
    }
    let d = cfg.dim;
    let mut per_seed = Vec::with_capacity(cfg.n_seeds as usize);
    let mut max_sn = 0.0_f64;
    let mut max_lin = 0.0_f64;
    for s in 0..cfg.n_seeds {
        let mut rng = RngStream::new(cfg.seed, 40_000 + s);
        let w = gaussian_matrix(d, d, 1.0 / (d as f64).sqrt(), &mut rng)?;
        let x = crate::linalg::gaussian_vector(d, 1.0, &mut rng)?;
        let gamma = Vector::from_vec((0..d).map(|_| rng.uniform(0.5, 1.5)).collect());
        let a = gaussian_matrix(d, d, 1.0 / (d as f64).sqrt(), &mut rng)?;
        let b = crate::linalg::gaussian_vector(d, 1.0, &mut rng)?;
        let loss = QuadraticLoss::new(a, b)?;
        let report = scale_invariance_check(&w, &x, &gamma, &loss, &cfg.alphas)?;
        max_sn = max_sn.max(report.sn_max_rel_dev);
        max_lin = max_lin.max(report.lin_quadratic_residual);
        per_seed.push(report);
    }
    Ok(ScaleSuiteReport {
        per_seed,
        max_sn_rel_dev: max_sn,
        max_lin_quadratic_residual: max_lin,
    })
}

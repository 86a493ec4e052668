//! The normalized-linear operator and its closed-form derivatives.
//!
//! The operator maps an input `x` through a linear layer and re-scales the
//! result onto a sphere of radius `sqrt(d)` before applying a learned
//! per-coordinate gain:
//!
//! ```text
//! y = gamma .* sqrt(d) * W x / |W x|
//! ```
//!
//! With the intermediates `z = W x`, `s = |z|`, `u = z / s`,
//! `P = I - u u^T` and `D = Diag(gamma)`, every first- and second-order
//! derivative of a loss `l(y)` has a closed form:
//!
//! - Jacobian                `dy/dx = (sqrt(d)/s) D P W`
//! - input gradient          `(sqrt(d)/s) W^T P D g_y`
//! - input Hessian           `L + C` (Gauss-Newton plus normalization
//!   curvature, see [`sn_hessian_x`])
//! - gain gradient/Hessian   `sqrt(d) (u .* g_y)`, `d Diag(u) H_yy Diag(u)`
//! - weight gradient         `(sqrt(d)/s) (P D g_y) x^T`
//! - weight Hessian          `(x x^T) (x) H_zz` over column-major `vec(W)`
//!
//! All formulas here are exact (no denominator guard); inputs whose image
//! `W x` nearly vanishes are rejected so the identities stay testable at
//! tight tolerances. The training path adds its own epsilon separately.

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

/// Reject |W x| below this guard instead of fudging the denominator.
pub const EPS_GUARD: f64 = 1e-30;

/// Side cap for assembled vec(W) Hessians (`m*d` by `m*d`).
pub const HESSIAN_SIDE_CAP: usize = 4096;

/// Relative asymmetry tolerated in a supplied `H_yy`.
pub const SYMMETRY_TOL: f64 = 1e-9;

/// Learnable state of one operator site: a `d x m` weight and a gain of
/// length `d`.
#[derive(Debug, Clone)]
pub struct SimpleNormParams {
    w: Matrix,
    gamma: Vector,
}

impl SimpleNormParams {
    pub fn new(w: Matrix, gamma: Vector) -> Result<Self> {
        if w.rows() == 0 || w.cols() == 0 {
            return Err(Error::Shape("weight must be at least 1x1".into()));
        }
        if gamma.len() != w.rows() {
            return Err(Error::Shape(format!(
                "gain length {} does not match weight rows {}",
                gamma.len(),
                w.rows()
            )));
        }
        if !w.is_finite() || !gamma.is_finite() {
            return Err(Error::Domain("non-finite parameter entries".into()));
        }
        Ok(Self { w, gamma })
    }

    pub fn weight(&self) -> &Matrix {
        &self.w
    }

    pub fn gamma(&self) -> &Vector {
        &self.gamma
    }

    /// Output dimension `d`.
    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }

    /// Input dimension `m`.
    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }

    /// Same weight scaled by `alpha`, same gain.
    pub fn scaled_weight(&self, alpha: f64) -> Self {
        Self {
            w: self.w.scale(alpha),
            gamma: self.gamma.clone(),
        }
    }
}

/// Intermediates of one forward evaluation, reused by every derivative.
#[derive(Debug, Clone)]
pub struct NormCache {
    pub z: Vector,
    pub s: f64,
    pub u: Vector,
    pub p: Matrix,
}

impl NormCache {
    /// `sqrt(d)` for the cached site.
    pub fn sqrt_d(&self) -> f64 {
        (self.u.len() as f64).sqrt()
    }
}

/// Gauss-Newton / curvature split of the input Hessian.
#[derive(Debug, Clone)]
pub struct HessianSplit {
    pub gauss_newton: Matrix,
    pub curvature: Matrix,
}

impl HessianSplit {
    pub fn total(&self) -> Matrix {
        self.gauss_newton
            .add(&self.curvature)
            .expect("split parts share a shape")
    }
}

fn check_symmetric(h: &Matrix, what: &str) -> Result<()> {
    if h.rows() != h.cols() {
        return Err(Error::Shape(format!("{what} must be square")));
    }
    let dev = h.asymmetry();
    if dev > SYMMETRY_TOL {
        return Err(Error::Asymmetric(format!(
            "{what} deviates from symmetry by {dev:e} (tolerance {SYMMETRY_TOL:e})"
        )));
    }
    Ok(())
}

fn check_cap(side: usize) -> Result<()> {
    if side > HESSIAN_SIDE_CAP {
        return Err(Error::SizeCap {
            side,
            cap: HESSIAN_SIDE_CAP,
        });
    }
    Ok(())
}

/// Forward map `y = gamma .* sqrt(d) * W x / |W x|` plus the cache.
///
/// Inputs in or near the null space of `W` are a degenerate-input error.
pub fn sn_forward(p: &SimpleNormParams, x: &Vector) -> Result<(Vector, NormCache)> {
    if x.len() != p.in_dim() {
        return Err(Error::Shape(format!(
            "input length {} does not match weight cols {}",
            x.len(),
            p.in_dim()
        )));
    }
    let z = p.w.matvec(x)?;
    let s = z.norm();
    if !(s >= EPS_GUARD) {
        return Err(Error::DegenerateInput {
            norm: s,
            guard: EPS_GUARD,
        });
    }
    let u = z.scale(1.0 / s);
    let d = p.out_dim();
    let mut proj = Matrix::identity(d);
    for i in 0..d {
        for j in 0..d {
            proj.set(i, j, proj.at(i, j) - u[i] * u[j]);
        }
    }
    let sqrt_d = (d as f64).sqrt();
    let y = p.gamma.hadamard(&u.scale(sqrt_d));
    Ok((
        y,
        NormCache {
            z,
            s,
            u,
            p: proj,
        },
    ))
}

/// Jacobian `dy/dx = (sqrt(d)/s) D P W`, a `d x m` matrix.
pub fn sn_jacobian(p: &SimpleNormParams, cache: &NormCache) -> Matrix {
    let d = p.out_dim();
    let m = p.in_dim();
    let scale = cache.sqrt_d() / cache.s;
    // rows of D P W: gamma_i * (P W)_i
    let pw = cache.p.matmul(&p.w).expect("cache matches params");
    let mut j = Matrix::zeros(d, m);
    for i in 0..d {
        let g = p.gamma[i] * scale;
        for c in 0..m {
            j.set(i, c, g * pw.at(i, c));
        }
    }
    j
}

/// Input gradient `(sqrt(d)/s) W^T P D g_y`.
pub fn sn_grad_x(p: &SimpleNormParams, cache: &NormCache, g_y: &Vector) -> Result<Vector> {
    if g_y.len() != p.out_dim() {
        return Err(Error::Shape(format!(
            "g_y length {} does not match output dim {}",
            g_y.len(),
            p.out_dim()
        )));
    }
    let dg = p.gamma.hadamard(g_y);
    let pdg = cache.p.matvec(&dg)?;
    Ok(p.w.matvec_t(&pdg)?.scale(cache.sqrt_d() / cache.s))
}

/// The symmetric middle factor of the curvature term,
/// `P D g u^T + (u^T D g) P + u (P D g)^T`, shared by the x- and W-Hessians.
fn curvature_core(cache: &NormCache, dg: &Vector) -> Result<Matrix> {
    let pdg = cache.p.matvec(dg)?;
    let scalar = cache.u.dot(dg);
    let d = cache.u.len();
    let mut core = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let v = pdg[i] * cache.u[j] + scalar * cache.p.at(i, j) + cache.u[i] * pdg[j];
            core.set(i, j, v);
        }
    }
    Ok(core)
}

/// Hessian of `x -> l(Psi(x))` split into its two parts:
///
/// ```text
/// L = (d/s^2)       W^T P D H_yy D P W
/// C = -(sqrt(d)/s^2) W^T ( P D g u^T + (u^T D g) P + u g^T D P ) W
/// ```
///
/// The scalar `u^T D g_y` multiplies `P` in the middle term. `H_yy` must be
/// symmetric; that is validated, not assumed.
pub fn sn_hessian_x(
    p: &SimpleNormParams,
    cache: &NormCache,
    g_y: &Vector,
    h_yy: &Matrix,
) -> Result<HessianSplit> {
    if g_y.len() != p.out_dim() || h_yy.rows() != p.out_dim() {
        return Err(Error::Shape("g_y / H_yy do not match the output dim".into()));
    }
    check_symmetric(h_yy, "H_yy")?;
    let d = p.out_dim() as f64;
    let s2 = cache.s * cache.s;

    // L = (d/s^2) (DPW)^T H (DPW)
    let pw = cache.p.matmul(&p.w)?;
    let mut dpw = pw.clone();
    for i in 0..p.out_dim() {
        let g = p.gamma[i];
        for c in 0..p.in_dim() {
            dpw.set(i, c, g * pw.at(i, c));
        }
    }
    let gauss_newton = dpw
        .transpose()
        .matmul(&h_yy.matmul(&dpw)?)?
        .scale(d / s2);

    // C = -(sqrt(d)/s^2) W^T core W
    let dg = p.gamma.hadamard(g_y);
    let core = curvature_core(cache, &dg)?;
    let curvature = p
        .w
        .transpose()
        .matmul(&core.matmul(&p.w)?)?
        .scale(-d.sqrt() / s2);

    Ok(HessianSplit {
        gauss_newton,
        curvature,
    })
}

/// Gain gradient `sqrt(d) (u .* g_y)`.
pub fn sn_grad_gamma(cache: &NormCache, g_y: &Vector) -> Result<Vector> {
    if g_y.len() != cache.u.len() {
        return Err(Error::Shape(format!(
            "g_y length {} does not match output dim {}",
            g_y.len(),
            cache.u.len()
        )));
    }
    Ok(cache.u.hadamard(g_y).scale(cache.sqrt_d()))
}

/// Gain Hessian `d * Diag(u) H_yy Diag(u)`; the map is linear in gamma so
/// the whole Hessian comes from `H_yy`.
pub fn sn_hessian_gamma(cache: &NormCache, h_yy: &Matrix) -> Result<Matrix> {
    let d = cache.u.len();
    if h_yy.rows() != d {
        return Err(Error::Shape("H_yy does not match the output dim".into()));
    }
    check_symmetric(h_yy, "H_yy")?;
    let mut out = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            out.set(i, j, (d as f64) * cache.u[i] * h_yy.at(i, j) * cache.u[j]);
        }
    }
    Ok(out)
}

/// Weight gradient `(sqrt(d)/s) (P D g_y) x^T`, a `d x m` matrix.
pub fn sn_grad_w(
    p: &SimpleNormParams,
    cache: &NormCache,
    x: &Vector,
    g_y: &Vector,
) -> Result<Matrix> {
    if x.len() != p.in_dim() || g_y.len() != p.out_dim() {
        return Err(Error::Shape("x / g_y do not match the weight shape".into()));
    }
    let dg = p.gamma.hadamard(g_y);
    let pdg = cache.p.matvec(&dg)?;
    Ok(Matrix::outer(&pdg.scale(cache.sqrt_d() / cache.s), x))
}

/// Hessian over column-major `vec(W)`: `(x x^T) (x) H_zz` with
///
/// ```text
/// H_zz = (d/s^2) P D H_yy D P - (sqrt(d)/s^2) (P D g u^T + (u^T D g) P + u g^T D P)
/// ```
///
/// The block at position `(i, j)` (size `d x d`) equals `x_i x_j H_zz`.
pub fn sn_hessian_w(
    p: &SimpleNormParams,
    cache: &NormCache,
    x: &Vector,
    g_y: &Vector,
    h_yy: &Matrix,
) -> Result<Matrix> {
    if x.len() != p.in_dim() || g_y.len() != p.out_dim() || h_yy.rows() != p.out_dim() {
        return Err(Error::Shape("x / g_y / H_yy do not match the weight shape".into()));
    }
    check_symmetric(h_yy, "H_yy")?;
    check_cap(p.in_dim() * p.out_dim())?;
    let d = p.out_dim();
    let s2 = cache.s * cache.s;

    // Gauss-Newton part of H_zz: (d/s^2) (DP)^T H (DP)
    let mut dp = cache.p.clone();
    for i in 0..d {
        let g = p.gamma[i];
        for j in 0..d {
            dp.set(i, j, g * cache.p.at(i, j));
        }
    }
    let gn = dp.transpose().matmul(&h_yy.matmul(&dp)?)?.scale(d as f64 / s2);

    let dg = p.gamma.hadamard(g_y);
    let core = curvature_core(cache, &dg)?.scale(-(d as f64).sqrt() / s2);
    let h_zz = gn.add(&core)?;

    Ok(Matrix::outer(x, x).kron(&h_zz))
}

/// Input Hessian of a plain linear map: `W^T H_yy W`.
pub fn lin_hessian_x(w: &Matrix, h_yy: &Matrix) -> Result<Matrix> {
    if h_yy.rows() != w.rows() {
        return Err(Error::Shape("H_yy does not match the weight rows".into()));
    }
    check_symmetric(h_yy, "H_yy")?;
    w.transpose().matmul(&h_yy.matmul(w)?)
}

/// Weight Hessian of a plain linear map over column-major `vec(W)`:
/// `(x x^T) (x) H_yy`, block `(i, j)` equal to `x_i x_j H_yy`.
pub fn lin_hessian_w(x: &Vector, h_yy: &Matrix) -> Result<Matrix> {
    check_symmetric(h_yy, "H_yy")?;
    check_cap(x.len() * h_yy.rows())?;
    Ok(Matrix::outer(x, x).kron(h_yy))
}

/// Column-major stacking of `W`, matching `vec(W x) = (x^T (x) I) vec(W)`.
/// The finite-difference oracle over weights must use the same order.
pub fn vec_w(w: &Matrix) -> Vector {
    let mut out = Vector::zeros(w.rows() * w.cols());
    for c in 0..w.cols() {
        for r in 0..w.rows() {
            out[c * w.rows() + r] = w.at(r, c);
        }
    }
    out
}

/// Inverse of [`vec_w`].
pub fn unvec_w(v: &Vector, rows: usize, cols: usize) -> Result<Matrix> {
    if v.len() != rows * cols {
        return Err(Error::Shape(format!(
            "vec length {} does not match {}x{}",
            v.len(),
            rows,
            cols
        )));
    }
    let mut w = Matrix::zeros(rows, cols);
    for c in 0..cols {
        for r in 0..rows {
            w.set(r, c, v[c * rows + r]);
        }
    }
    Ok(w)
}

//! Largest-singular-value estimation by power iteration on `M^T M`.

use crate::error::{Error, Result};
use crate::linalg::{unit_vector, Matrix};
use crate::rng::RngStream;

/// Default relative convergence tolerance.
pub const DEFAULT_TOL: f64 = 1e-10;
/// Default iteration budget.
pub const DEFAULT_MAX_ITER: usize = 10_000;

/// Largest singular value of `m`.
///
/// Starts from a random unit vector drawn from `rng` and iterates
/// `v <- normalize(M^T M v)`, tracking `sigma = |M v|`. Converged when two
/// successive estimates differ relatively by less than `tol`. Failure to
/// converge is reported rather than silently returning the last value.
pub fn spectral_norm(
    m: &Matrix,
    tol: f64,
    max_iter: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::Shape("spectral_norm of an empty matrix".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::Scale(format!(
            "spectral_norm tolerance must be positive, got {tol}"
        )));
    }
    let mut v = unit_vector(m.cols(), rng)?;
    let mut sigma_prev = f64::NAN;
    for _ in 0..max_iter {
        let w = m.matvec(&v).expect("matvec shape checked above");
        let sigma = w.norm();
        if sigma == 0.0 {
            // v is in the null space; for a random start this means M = 0.
            return Ok(0.0);
        }
        if sigma_prev.is_finite() && (sigma - sigma_prev).abs() < tol * sigma.max(f64::MIN_POSITIVE)
        {
            return Ok(sigma);
        }
        sigma_prev = sigma;
        let back = m.matvec_t(&w).expect("matvec_t shape checked above");
        v = match back.normalized() {
            Ok(u) => u,
            Err(_) => return Ok(0.0),
        };
    }
    Err(Error::NoConvergence {
        max_iter,
        last_estimate: sigma_prev,
    })
}

/// [`spectral_norm`] with the default tolerance and budget.
pub fn spectral_norm_default(m: &Matrix, rng: &mut RngStream) -> Result<f64> {
    spectral_norm(m, DEFAULT_TOL, DEFAULT_MAX_ITER, rng)
}

/// Deterministic convenience wrapper: uses a stream derived from the matrix
/// dimensions, so repeated calls on equal inputs return identical values.
pub fn spectral_norm_fixed(m: &Matrix) -> Result<f64> {
    let stream = (m.rows() as u64) << 32 | m.cols() as u64;
    spectral_norm_default(m, &mut RngStream::new(0x5eec_7a41, stream))
}

//! Central finite differences — the independent oracle that every analytic
//! derivative in this crate is checked against.

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

/// Step for gradient probes: 1e-5 scaled by the input magnitude.
pub fn default_gradient_step(x: &Vector) -> f64 {
    1e-5 * x.inf_norm().max(1.0)
}

/// Step for Hessian probes. Second differences divide by h^2, so the
/// roundoff floor sits near eps*|f|/h^2; 1e-4 keeps that below the
/// truncation error instead of above it.
pub fn default_hessian_step(x: &Vector) -> f64 {
    1e-4 * x.inf_norm().max(1.0)
}

fn eval<F: FnMut(&Vector) -> f64>(f: &mut F, x: &Vector, probe: usize) -> Result<f64> {
    let v = f(x);
    if !v.is_finite() {
        return Err(Error::NonFiniteEval { probe });
    }
    Ok(v)
}

/// Gradient by central differences: `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn fd_gradient<F: FnMut(&Vector) -> f64>(mut f: F, x: &Vector, h: f64) -> Result<Vector> {
    if !(h > 0.0) {
        return Err(Error::Scale(format!("fd step must be positive, got {h}")));
    }
    let mut g = Vector::zeros(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = eval(&mut f, &probe, i)?;
        probe[i] = x[i] - h;
        let minus = eval(&mut f, &probe, i)?;
        probe[i] = x[i];
        g[i] = (plus - minus) / (2.0 * h);
    }
    Ok(g)
}

/// Hessian by second-order central differences, symmetrized as
/// `(H + H^T) / 2` (each off-diagonal pair is computed once and mirrored).
pub fn fd_hessian<F: FnMut(&Vector) -> f64>(mut f: F, x: &Vector, h: f64) -> Result<Matrix> {
    if !(h > 0.0) {
        return Err(Error::Scale(format!("fd step must be positive, got {h}")));
    }
    let n = x.len();
    let mut hess = Matrix::zeros(n, n);
    let f0 = eval(&mut f, x, 0)?;
    let mut probe = x.clone();
    for i in 0..n {
        probe[i] = x[i] + h;
        let plus = eval(&mut f, &probe, i)?;
        probe[i] = x[i] - h;
        let minus = eval(&mut f, &probe, i)?;
        probe[i] = x[i];
        hess.set(i, i, (plus - 2.0 * f0 + minus) / (h * h));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let mut probe4 = |si: f64, sj: f64, f: &mut F| -> Result<f64> {
                probe[i] = x[i] + si * h;
                probe[j] = x[j] + sj * h;
                let v = eval(f, &probe, i * n + j)?;
                probe[i] = x[i];
                probe[j] = x[j];
                Ok(v)
            };
            let pp = probe4(1.0, 1.0, &mut f)?;
            let pm = probe4(1.0, -1.0, &mut f)?;
            let mp = probe4(-1.0, 1.0, &mut f)?;
            let mm = probe4(-1.0, -1.0, &mut f)?;
            let v = (pp - pm - mp + mm) / (4.0 * h * h);
            hess.set(i, j, v);
            hess.set(j, i, v);
        }
    }
    Ok(hess)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian_matrix, gaussian_vector};
    use crate::rng::RngStream;

    #[test]
    fn gradient_of_squared_norm() {
        let x = Vector::from_slice(&[1.0, 2.0]);
        let g = fd_gradient(|v| v.dot(v), &x, 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8);
        assert!((g[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let x = Vector::from_slice(&[0.3, -0.7, 2.0]);
        let g = fd_gradient(|_| 4.5, &x, 1e-5).unwrap();
        for i in 0..3 {
            assert!(g[i].abs() < 1e-10);
        }
    }

    #[test]
    fn quadratic_gradient_matches_closed_form() {
        let mut rng = RngStream::new(21, 0);
        for trial in 0..100 {
            let d = [4, 8, 16][trial % 3];
            let a = gaussian_matrix(d, d, 1.0, &mut rng)
                .unwrap()
                .symmetrized()
                .unwrap();
            let b = gaussian_vector(d, 1.0, &mut rng).unwrap();
            let x = gaussian_vector(d, 1.0, &mut rng).unwrap();
            let f = |v: &Vector| 0.5 * v.dot(&a.matvec(v).unwrap()) + b.dot(v);
            let g = fd_gradient(f, &x, default_gradient_step(&x)).unwrap();
            let expected = a.matvec(&x).unwrap().add(&b);
            let rel = g.sub(&expected).norm() / expected.norm().max(1e-12);
            assert!(rel < 1e-7, "trial {trial}: rel err {rel}");
        }
    }

    #[test]
    fn quadratic_hessian_matches_closed_form() {
        let mut rng = RngStream::new(22, 0);
        for trial in 0..100 {
            let d = [4, 8, 16][trial % 3];
            let a = gaussian_matrix(d, d, 1.0, &mut rng)
                .unwrap()
                .symmetrized()
                .unwrap();
            let b = gaussian_vector(d, 1.0, &mut rng).unwrap();
            let x = gaussian_vector(d, 1.0, &mut rng).unwrap();
            let f = |v: &Vector| 0.5 * v.dot(&a.matvec(v).unwrap()) + b.dot(v);
            let h = fd_hessian(f, &x, default_hessian_step(&x)).unwrap();
            let rel = h.sub(&a).unwrap().frobenius_norm() / a.frobenius_norm();
            assert!(rel < 1e-5, "trial {trial}: rel err {rel}");
        }
    }

    #[test]
    fn linear_function_has_zero_hessian() {
        let x = Vector::from_slice(&[1.0, -2.0, 0.5, 3.0]);
        let h = fd_hessian(|v| 3.0 * v[0] - v[2] + 0.25 * v[3], &x, 1e-4).unwrap();
        assert!(h.max_abs() < 1e-6, "max {}", h.max_abs());
    }

    #[test]
    fn squared_norm_hessian_is_two_i() {
        let x = Vector::from_slice(&[0.2, -1.0, 4.0]);
        let h = fd_hessian(|v| v.dot(v), &x, 1e-4).unwrap();
        let err = h.sub(&Matrix::identity(3).scale(2.0)).unwrap().max_abs();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn non_finite_evaluation_is_an_error() {
        let x = Vector::from_slice(&[0.0]);
        let r = fd_gradient(|v| 1.0 / v[0], &x, 1e-5);
        assert!(r.is_ok()); // probes at +-h avoid the pole
        let r = fd_gradient(|v| (v[0] - 1e-5).ln(), &x, 1e-5);
        assert!(matches!(r, Err(Error::NonFiniteEval { .. })));
    }
}

//! Quadratic test loss `l(y) = y^T A y / 2 + b^T y` with a symmetric `A`.
//!
//! Both derivative orders are controllable in closed form: the gradient is
//! `A y + b` and the Hessian is `A`, which makes the loss the canonical
//! instrument for checking analytic derivatives and curvature claims.

use crate::error::{Error, Result};
use crate::linalg::{random_orthogonal, Matrix, Vector};
use crate::rng::RngStream;

#[derive(Debug, Clone)]
pub struct QuadraticLoss {
    a: Matrix,
    b: Vector,
}

impl QuadraticLoss {
    /// Builds the loss from a raw square matrix, symmetrizing it exactly.
    pub fn new(a: Matrix, b: Vector) -> Result<Self> {
        if a.rows() != a.cols() {
            return Err(Error::Shape(format!(
                "quadratic loss matrix must be square, got {}x{}",
                a.rows(),
                a.cols()
            )));
        }
        if a.rows() != b.len() {
            return Err(Error::Shape(format!(
                "quadratic loss matrix is {}x{} but b has length {}",
                a.rows(),
                a.cols(),
                b.len()
            )));
        }
        Ok(Self {
            a: a.symmetrized()?,
            b,
        })
    }

    /// Builds a loss whose gradient at `y` equals `g` exactly up to roundoff:
    /// `b = g - A y`.
    pub fn with_gradient_at(a: Matrix, y: &Vector, g: &Vector) -> Result<Self> {
        let a = a.symmetrized()?;
        let b = g.sub(&a.matvec(y)?);
        Self::new(a, b)
    }

    /// `A = Q diag(lambda) Q^T` with `Q` random orthogonal and eigenvalues
    /// log-uniform on `[lambda_min, lambda_max]`, rescaled so the spectral
    /// norm is exactly the largest sampled magnitude ratio, i.e. |A|_2 = 1.
    pub fn spectrum_log_uniform(
        d: usize,
        lambda_min: f64,
        lambda_max: f64,
        rng: &mut RngStream,
    ) -> Result<Matrix> {
        if !(lambda_min > 0.0 && lambda_max > lambda_min) {
            return Err(Error::Domain(format!(
                "log-uniform spectrum needs 0 < min < max, got [{lambda_min}, {lambda_max}]"
            )));
        }
        let q = random_orthogonal(d, rng)?;
        let mut lambdas: Vec<f64> = (0..d)
            .map(|_| (lambda_min.ln() + rng.next_f64() * (lambda_max.ln() - lambda_min.ln())).exp())
            .collect();
        let top = lambdas.iter().cloned().fold(0.0_f64, f64::max);
        for l in &mut lambdas {
            *l /= top;
        }
        // Sum of lambda_k q_k q_k^T; grouping the multiply as l * (qi * qj)
        // keeps the assembled matrix bitwise symmetric.
        let mut a = Matrix::zeros(d, d);
        for (k, &l) in lambdas.iter().enumerate() {
            for i in 0..d {
                let qi = q.at(i, k);
                for j in 0..d {
                    a.set(i, j, a.at(i, j) + l * (qi * q.at(j, k)));
                }
            }
        }
        Ok(a)
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn value(&self, y: &Vector) -> f64 {
        0.5 * y.dot(&self.a.matvec(y).expect("dim checked at construction")) + self.b.dot(y)
    }

    /// `g_y = A y + b`.
    pub fn grad(&self, y: &Vector) -> Vector {
        self.a
            .matvec(y)
            .expect("dim checked at construction")
            .add(&self.b)
    }

    /// `H_yy = A`.
    pub fn hessian(&self) -> &Matrix {
        &self.a
    }
}

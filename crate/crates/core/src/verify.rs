//! Oracle suite for the operator derivatives.
//!
//! Every analytic derivative exposed by [`crate::simplenorm`] is checked
//! against central finite differences on seeded random instances with a
//! quadratic loss. The suite is a library function so the command line and
//! the acceptance tests run exactly the same checks.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fd::{default_gradient_step, default_hessian_step, fd_gradient, fd_hessian};
use crate::linalg::{gaussian_matrix, gaussian_vector, Matrix, Vector};
use crate::quadratic::QuadraticLoss;
use crate::rng::RngStream;
use crate::simplenorm::{
    lin_hessian_w, lin_hessian_x, sn_forward, sn_grad_gamma, sn_grad_w, sn_grad_x,
    sn_hessian_gamma, sn_hessian_w, sn_hessian_x, unvec_w, vec_w, SimpleNormParams,
};

/// Stream-id namespace for verification instances.
const STREAM_BASE: u64 = 5_000;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub instances: usize,
    pub dims: Vec<usize>,
    pub grad_tol: f64,
    pub hess_tol: f64,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            dims: vec![4, 8, 16],
            grad_tol: 1e-6,
            hess_tol: 1e-4,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IdentityReport {
    pub identity: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub identities: Vec<IdentityReport>,
    pub all_passed: bool,
}

impl VerifyReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("identity,instances,max_rel_err,tolerance,passed\n");
        for r in &self.identities {
            out.push_str(&format!(
                "{},{},{:e},{:e},{}\n",
                r.identity, r.instances, r.max_rel_err, r.tolerance, r.passed
            ));
        }
        out
    }
}

fn rel_vec(analytic: &Vector, oracle: &Vector) -> f64 {
    analytic.sub(oracle).norm() / oracle.norm().max(1e-12)
}

fn rel_mat(analytic: &Matrix, oracle: &Matrix) -> f64 {
    analytic
        .sub(oracle)
        .expect("shapes agree")
        .frobenius_norm()
        / oracle.frobenius_norm().max(1e-12)
}

struct Instance {
    params: SimpleNormParams,
    x: Vector,
    loss: QuadraticLoss,
    g_y: Vector,
}

fn build_instance(d: usize, m: usize, rng: &mut RngStream) -> Result<Instance> {
    let w = gaussian_matrix(d, m, 1.0 / (m as f64).sqrt(), rng)?;
    let gamma = Vector::from_vec((0..d).map(|_| rng.uniform(0.5, 1.5)).collect());
    let params = SimpleNormParams::new(w, gamma)?;
    let x = gaussian_vector(m, 1.0, rng)?;
    let a = gaussian_matrix(d, d, 1.0 / (d as f64).sqrt(), rng)?;
    let b = gaussian_vector(d, 1.0, rng)?;
    let loss = QuadraticLoss::new(a, b)?;
    let (y, _) = sn_forward(&params, &x)?;
    let g_y = loss.grad(&y);
    Ok(Instance {
        params,
        x,
        loss,
        g_y,
    })
}

/// Runs all eight derivative identities over the configured instances and
/// reports the worst relative error per identity.
pub fn run_verification(cfg: &VerifyConfig) -> Result<VerifyReport> {
    let names: [&'static str; 8] = [
        "sn_grad_x",
        "sn_hessian_x",
        "sn_grad_gamma",
        "sn_hessian_gamma",
        "sn_grad_w",
        "sn_hessian_w",
        "lin_hessian_x",
        "lin_hessian_w",
    ];
    let mut worst = [0.0_f64; 8];
    let n_dims = cfg.dims.len().max(1);

    for i in 0..cfg.instances {
        let d = cfg.dims[i % n_dims];
        let m = cfg.dims[(i / n_dims) % n_dims];
        let mut rng = RngStream::new(cfg.seed, STREAM_BASE + i as u64);
        let inst = build_instance(d, m, &mut rng)?;
        let params = &inst.params;
        let loss = &inst.loss;
        let (_, cache) = sn_forward(params, &inst.x)?;
        let h_yy = loss.hessian();

        // x -> l(Psi(x))
        let f_x = |v: &Vector| match sn_forward(params, v) {
            Ok((y, _)) => loss.value(&y),
            Err(_) => f64::NAN,
        };
        let an = sn_grad_x(params, &cache, &inst.g_y)?;
        let fd = fd_gradient(f_x, &inst.x, default_gradient_step(&inst.x))?;
        worst[0] = worst[0].max(rel_vec(&an, &fd));

        let split = sn_hessian_x(params, &cache, &inst.g_y, h_yy)?;
        let fd = fd_hessian(f_x, &inst.x, default_hessian_step(&inst.x))?;
        worst[1] = worst[1].max(rel_mat(&split.total(), &fd));

        // gamma -> l(Psi(x; W, gamma))
        let f_gamma = |g: &Vector| {
            match SimpleNormParams::new(params.weight().clone(), g.clone())
                .and_then(|p| sn_forward(&p, &inst.x))
            {
                Ok((y, _)) => loss.value(&y),
                Err(_) => f64::NAN,
            }
        };
        let an = sn_grad_gamma(&cache, &inst.g_y)?;
        let fd = fd_gradient(f_gamma, params.gamma(), default_gradient_step(params.gamma()))?;
        worst[2] = worst[2].max(rel_vec(&an, &fd));

        let an = sn_hessian_gamma(&cache, h_yy)?;
        let fd = fd_hessian(f_gamma, params.gamma(), default_hessian_step(params.gamma()))?;
        worst[3] = worst[3].max(rel_mat(&an, &fd));

        // vec(W) -> l(Psi(x; W, gamma)), column-major stacking
        let f_w = |vw: &Vector| {
            match unvec_w(vw, d, m)
                .and_then(|w| SimpleNormParams::new(w, params.gamma().clone()))
                .and_then(|p| sn_forward(&p, &inst.x))
            {
                Ok((y, _)) => loss.value(&y),
                Err(_) => f64::NAN,
            }
        };
        let w_flat = vec_w(params.weight());
        let an = vec_w(&sn_grad_w(params, &cache, &inst.x, &inst.g_y)?);
        let fd = fd_gradient(f_w, &w_flat, default_gradient_step(&w_flat))?;
        worst[4] = worst[4].max(rel_vec(&an, &fd));

        let an = sn_hessian_w(params, &cache, &inst.x, &inst.g_y, h_yy)?;
        let fd = fd_hessian(f_w, &w_flat, default_hessian_step(&w_flat))?;
        worst[5] = worst[5].max(rel_mat(&an, &fd));

        // plain linear map: x -> l(W x) and vec(W) -> l(W x)
        let f_lin_x = |v: &Vector| match params.weight().matvec(v) {
            Ok(y) => loss.value(&y),
            Err(_) => f64::NAN,
        };
        let an = lin_hessian_x(params.weight(), h_yy)?;
        let fd = fd_hessian(f_lin_x, &inst.x, default_hessian_step(&inst.x))?;
        worst[6] = worst[6].max(rel_mat(&an, &fd));

        let f_lin_w = |vw: &Vector| match unvec_w(vw, d, m).and_then(|w| w.matvec(&inst.x)) {
            Ok(y) => loss.value(&y),
            Err(_) => f64::NAN,
        };
        let an = lin_hessian_w(&inst.x, h_yy)?;
        let fd = fd_hessian(f_lin_w, &w_flat, default_hessian_step(&w_flat))?;
        worst[7] = worst[7].max(rel_mat(&an, &fd));
    }

    let identities: Vec<IdentityReport> = names
        .iter()
        .enumerate()
        .map(|(k, &identity)| {
            let tolerance = if identity.contains("hessian") {
                cfg.hess_tol
            } else {
                cfg.grad_tol
            };
            IdentityReport {
                identity,
                instances: cfg.instances,
                max_rel_err: worst[k],
                tolerance,
                passed: worst[k] <= tolerance,
            }
        })
        .collect();
    let all_passed = identities.iter().all(|r| r.passed);
    Ok(VerifyReport {
        identities,
        all_passed,
    })
}

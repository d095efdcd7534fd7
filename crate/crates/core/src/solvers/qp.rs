//! Strongly convex quadratic programs over the non-negative orthant:
//! `min ½zᵀPz + bᵀz  s.t. z ≥ 0`.
//!
//! Solved by ADMM on the splitting `x = z`, `z ≥ 0` with over-relaxation.
//! Once the residuals are small the support of `z` is used to solve the
//! reduced KKT system directly (solution polishing); a warm start whose support
//! is already correct therefore costs a single small factorization.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{is_symmetric, solve_principal};

pub const DEFAULT_QP_TOL: f64 = 1e-6;
pub const DEFAULT_QP_MAX_ITER: usize = 20_000;

const RELAXATION: f64 = 1.6;
const POLISH_EVERY: usize = 25;

#[derive(Debug, Clone)]
pub struct QpNonneg {
    p: DMatrix<f64>,
    b: DVector<f64>,
}

impl QpNonneg {
    /// Requires `P` symmetric within 1e-10 and positive definite.
    pub fn new(p: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if !p.is_square() || p.nrows() != b.len() {
            return Err(Error::Dimension {
                what: "QP linear term",
                expected: p.nrows(),
                got: b.len(),
            });
        }
        if !is_symmetric(&p, 1e-10) {
            return Err(Error::InvalidProblem("QP matrix is not symmetric".into()));
        }
        if p.nrows() > 0 && p.clone().cholesky().is_none() {
            return Err(Error::InvalidProblem("QP matrix is not positive definite".into()));
        }
        Ok(Self { p, b })
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.p * z)) + self.b.dot(z)
    }

    /// `‖min(z, Pz + b)‖_∞`, zero exactly at the optimum.
    pub fn kkt_residual(&self, z: &DVector<f64>) -> f64 {
        let g = &self.p * z + &self.b;
        z.iter()
            .zip(g.iter())
            .fold(0.0, |acc, (zi, gi)| acc.max(zi.min(*gi).abs()))
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub iterations: usize,
}

pub fn solve_qp_nonneg(p: &QpNonneg, tol: f64) -> Result<DVector<f64>> {
    solve_qp_nonneg_warm(p, tol, None).map(|s| s.z)
}

pub fn solve_qp_nonneg_warm(p: &QpNonneg, tol: f64, warm: Option<&DVector<f64>>) -> Result<QpSolution> {
    if !(tol > 0.0) {
        return Err(Error::InvalidProblem(format!("QP tolerance must be positive, got {tol}")));
    }
    let n = p.dim();
    if n == 0 {
        return Ok(QpSolution {
            z: DVector::zeros(0),
            iterations: 0,
        });
    }
    let mut z = match warm {
        Some(w) if w.len() == n => w.map(|v| v.max(0.0)),
        _ => DVector::zeros(n),
    };
    if let Some(sol) = polish(p, &z, tol) {
        return Ok(QpSolution { z: sol, iterations: 0 });
    }

    let rho = (p.p.trace() / n as f64).max(1e-8);
    let mut kkt = p.p.clone();
    for i in 0..n {
        kkt[(i, i)] += rho;
    }
    let chol = kkt
        .cholesky()
        .ok_or_else(|| Error::InvalidProblem("QP matrix is not positive definite".into()))?;

    let mut u = DVector::zeros(n);
    let mut residual = f64::INFINITY;
    for k in 1..=DEFAULT_QP_MAX_ITER {
        let rhs = (&z - &u) * rho - &p.b;
        let x = chol.solve(&rhs);
        let x_hat = &x * RELAXATION + &z * (1.0 - RELAXATION);
        let z_prev = z.clone();
        z = (&x_hat + &u).map(|v| v.max(0.0));
        u += &x_hat - &z;

        let primal = (&x - &z).amax();
        let dual = rho * (&z - &z_prev).amax();
        residual = primal.max(dual);
        if k % POLISH_EVERY == 0 || residual <= tol {
            if let Some(sol) = polish(p, &z, tol) {
                return Ok(QpSolution { z: sol, iterations: k });
            }
            if residual <= tol && p.kkt_residual(&z) <= tol {
                return Ok(QpSolution { z, iterations: k });
            }
        }
    }
    Err(Error::NoConvergence {
        solver: "QP ADMM",
        iterations: DEFAULT_QP_MAX_ITER,
        residual,
    })
}

/// Guess the free set from `z`, refine it with a few primal-dual active-set
/// steps and return the reduced KKT solution if it is optimal.
fn polish(p: &QpNonneg, z: &DVector<f64>, tol: f64) -> Option<DVector<f64>> {
    let n = p.dim();
    let g0 = &p.p * z + &p.b;
    let mut free: Vec<bool> = (0..n).map(|i| z[i] > 0.0 || g0[i] < 0.0).collect();
    let neg_b = -&p.b;
    for _ in 0..=n {
        let idx: Vec<usize> = (0..n).filter(|&i| free[i]).collect();
        let sub = solve_principal(&p.p, &neg_b, &idx)?;
        let mut cand = DVector::zeros(n);
        for (k, &i) in idx.iter().enumerate() {
            cand[i] = sub[k];
        }
        let grad = &p.p * &cand + &p.b;
        let mut changed = false;
        for i in 0..n {
            let next = if free[i] { cand[i] > 0.0 } else { grad[i] < 0.0 };
            changed |= next != free[i];
            free[i] = next;
        }
        if !changed {
            let cleaned = cand.map(|v| v.max(0.0));
            return (p.kkt_residual(&cleaned) <= tol).then_some(cleaned);
        }
    }
    None
}

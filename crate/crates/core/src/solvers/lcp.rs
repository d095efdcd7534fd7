//! Monotone linear complementarity problems.
//!
//! Find `λ ≥ 0` with `w = Mλ + q ≥ 0` and `λᵀw = 0`, for matrices whose
//! symmetric part is positive definite. Such problems have exactly one
//! solution.
//!
//! The iterative solver runs an extragradient projection
//! `λ ← max(0, λ − α(Mλ + q))` with `α = 1/‖M‖₂`. Every few sweeps it guesses
//! the active set from the iterate and runs a short primal-dual active-set
//! refinement; when the guess verifies, the exact solution of the reduced
//! linear system is returned.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{min_sym_eigenvalue, solve_principal, spectral_norm};

pub const DEFAULT_LCP_TOL: f64 = 1e-8;
pub const DEFAULT_LCP_MAX_ITER: usize = 10_000;
/// Largest problem [`solve_lcp_enum`] will accept.
pub const MAX_ENUM_DIM: usize = 12;

const POLISH_EVERY: usize = 8;

#[derive(Debug, Clone)]
pub struct LcpProblem {
    m: DMatrix<f64>,
    q: DVector<f64>,
}

impl LcpProblem {
    /// Checks that `M` is square, matches `q`, and that `M + Mᵀ` is positive definite.
    pub fn new(m: DMatrix<f64>, q: DVector<f64>) -> Result<Self> {
        Self::check_dims(&m, &q)?;
        let min_eig = min_sym_eigenvalue(&m);
        if !(min_eig > 0.0) && m.nrows() > 0 {
            return Err(Error::NonMonotone(2.0 * min_eig));
        }
        Ok(Self { m, q })
    }

    /// Builds a problem whose monotonicity is already guaranteed by the caller
    /// (e.g. `M = F` from validated LCS parameters).
    pub(crate) fn new_trusted(m: DMatrix<f64>, q: DVector<f64>) -> Result<Self> {
        Self::check_dims(&m, &q)?;
        Ok(Self { m, q })
    }

    fn check_dims(m: &DMatrix<f64>, q: &DVector<f64>) -> Result<()> {
        if !m.is_square() {
            return Err(Error::InvalidProblem(format!(
                "LCP matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.nrows() != q.len() {
            return Err(Error::Dimension {
                what: "LCP q",
                expected: m.nrows(),
                got: q.len(),
            });
        }
        Ok(())
    }

    pub fn m(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn q(&self) -> &DVector<f64> {
        &self.q
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn slack(&self, lambda: &DVector<f64>) -> DVector<f64> {
        &self.m * lambda + &self.q
    }

    pub fn residual(&self, lambda: &DVector<f64>) -> LcpResidual {
        let w = self.slack(lambda);
        LcpResidual {
            min_lambda: lambda.iter().copied().fold(f64::INFINITY, f64::min),
            min_slack: w.iter().copied().fold(f64::INFINITY, f64::min),
            complementarity: lambda.dot(&w).abs(),
        }
    }

    /// Post-condition of [`solve_lcp`] at tolerance `tol`.
    pub fn is_solved(&self, lambda: &DVector<f64>, tol: f64) -> bool {
        let res = self.residual(lambda);
        let scale = 1.0 + self.q.norm();
        (self.dim() == 0)
            || (res.min_lambda >= -tol
                && res.min_slack >= -tol
                && res.complementarity <= tol * scale)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LcpResidual {
    pub min_lambda: f64,
    pub min_slack: f64,
    pub complementarity: f64,
}

impl LcpResidual {
    pub fn max_violation(&self) -> f64 {
        (-self.min_lambda)
            .max(-self.min_slack)
            .max(self.complementarity)
            .max(0.0)
    }
}

pub fn solve_lcp(p: &LcpProblem, tol: f64) -> Result<DVector<f64>> {
    solve_lcp_from(p, tol, None)
}

/// Iterative solve starting from `warm` (projected onto `λ ≥ 0`), or from zero.
pub fn solve_lcp_from(p: &LcpProblem, tol: f64, warm: Option<&DVector<f64>>) -> Result<DVector<f64>> {
    solve_lcp_with(p, tol, DEFAULT_LCP_MAX_ITER, warm)
}

pub fn solve_lcp_with(
    p: &LcpProblem,
    tol: f64,
    max_iter: usize,
    warm: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    if !(tol > 0.0) {
        return Err(Error::InvalidProblem(format!("LCP tolerance must be positive, got {tol}")));
    }
    let r = p.dim();
    if r == 0 {
        return Ok(DVector::zeros(0));
    }
    let mut lambda = match warm {
        Some(w) if w.len() == r => w.map(|v| v.max(0.0)),
        Some(w) => {
            return Err(Error::Dimension {
                what: "LCP warm start",
                expected: r,
                got: w.len(),
            })
        }
        None => DVector::zeros(r),
    };

    let norm = spectral_norm(&p.m);
    if norm == 0.0 {
        // M = 0 is excluded by monotonicity, but trusted problems skip that check.
        return Err(Error::NonMonotone(0.0));
    }
    let step = 1.0 / norm;

    let mut w = p.slack(&lambda);
    let mut residual = f64::INFINITY;
    for k in 0..max_iter {
        if k % POLISH_EVERY == 0 {
            if let Some(sol) = active_set_refine(p, &lambda, &w, tol) {
                return Ok(sol);
            }
        }
        residual = natural_residual(&lambda, &w);
        if residual <= tol * 1e-2 && p.is_solved(&lambda, tol) {
            return Ok(lambda);
        }
        if !residual.is_finite() {
            break;
        }
        let trial = (&lambda - &w * step).map(|v| v.max(0.0));
        let w_trial = p.slack(&trial);
        let next = (&lambda - &w_trial * step).map(|v| v.max(0.0));
        // Strong monotonicity forces a contraction; a growing iterate means the
        // trusted matrix was not monotone after all.
        if next.norm() > 1e12 * (1.0 + p.q.norm()) {
            return Err(Error::NonMonotone(min_sym_eigenvalue(&p.m) * 2.0));
        }
        lambda = next;
        w = p.slack(&lambda);
    }
    if p.is_solved(&lambda, tol) {
        return Ok(lambda);
    }
    Err(Error::NoConvergence {
        solver: "LCP extragradient",
        iterations: max_iter,
        residual,
    })
}

fn natural_residual(lambda: &DVector<f64>, w: &DVector<f64>) -> f64 {
    lambda
        .iter()
        .zip(w.iter())
        .fold(0.0, |acc, (l, s)| acc.max(l.min(*s).abs()))
}

/// Primal-dual active-set refinement seeded by the sign pattern of `(λ, w)`.
fn active_set_refine(
    p: &LcpProblem,
    lambda: &DVector<f64>,
    w: &DVector<f64>,
    tol: f64,
) -> Option<DVector<f64>> {
    let r = p.dim();
    let mut active: Vec<bool> = (0..r).map(|i| lambda[i] > w[i]).collect();
    let neg_q = -&p.q;
    for _ in 0..=r {
        let idx: Vec<usize> = (0..r).filter(|&i| active[i]).collect();
        let sub = solve_principal(&p.m, &neg_q, &idx)?;
        let mut cand = DVector::zeros(r);
        for (k, &i) in idx.iter().enumerate() {
            cand[i] = sub[k];
        }
        let slack = p.slack(&cand);
        let mut changed = false;
        for i in 0..r {
            let next = if active[i] { cand[i] > 0.0 } else { slack[i] < 0.0 };
            changed |= next != active[i];
            active[i] = next;
        }
        if !changed {
            // Active-set solve is exact up to rounding; clear sub-tolerance negatives.
            let cleaned = cand.map(|v| if v < 0.0 { 0.0 } else { v });
            return p.is_solved(&cleaned, tol).then_some(cleaned);
        }
    }
    None
}

/// Brute-force solve over all `2^r` active sets.
///
/// Returns the unique solution, `NoSolution` if no active set is feasible and
/// `AmbiguousSolution` if two feasible sets disagree.
pub fn solve_lcp_enum(p: &LcpProblem) -> Result<DVector<f64>> {
    let r = p.dim();
    if r > MAX_ENUM_DIM {
        return Err(Error::TooLarge {
            max: MAX_ENUM_DIM,
            got: r,
        });
    }
    let scale = 1.0 + p.q.amax() + p.m.amax();
    let feas_tol = 1e-10 * scale;
    let neg_q = -&p.q;
    let mut found: Option<DVector<f64>> = None;
    for mask in 0u32..(1u32 << r) {
        let idx: Vec<usize> = (0..r).filter(|i| mask & (1 << i) != 0).collect();
        let Some(sub) = solve_principal(&p.m, &neg_q, &idx) else {
            continue;
        };
        if sub.iter().any(|&v| v < -feas_tol) {
            continue;
        }
        let mut cand = DVector::zeros(r);
        for (k, &i) in idx.iter().enumerate() {
            cand[i] = sub[k].max(0.0);
        }
        let slack = p.slack(&cand);
        if (0..r).any(|i| mask & (1 << i) == 0 && slack[i] < -feas_tol) {
            continue;
        }
        match &found {
            None => found = Some(cand),
            Some(prev) => {
                if (prev - &cand).amax() > 1e-8 * (1.0 + prev.amax()) {
                    return Err(Error::AmbiguousSolution);
                }
            }
        }
    }
    found.ok_or(Error::NoSolution)
}

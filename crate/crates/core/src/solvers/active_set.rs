//! Small dense strictly convex QPs with linear inequalities:
//! `min ½xᵀHx + gᵀx  s.t. Gx ≤ h`.
//!
//! Primal active-set method started from a feasible point. Each iteration
//! solves the equality-constrained subproblem on the working set through its
//! KKT system.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct IneqQp {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IneqQpSolution {
    pub x: DVector<f64>,
    /// One non-negative multiplier per inequality row.
    pub multipliers: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
}

impl IneqQp {
    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.g.dot(x)
    }

    /// Largest constraint violation `max(Gx − h)⁺`.
    pub fn infeasibility(&self, x: &DVector<f64>) -> f64 {
        (&self.a * x - &self.b).iter().fold(0.0f64, |acc, v| acc.max(*v))
    }

    fn validate(&self, x0: &DVector<f64>) -> Result<()> {
        let n = self.h.nrows();
        for (what, expected, got) in [
            ("QP Hessian columns", n, self.h.ncols()),
            ("QP linear term", n, self.g.len()),
            ("QP constraint columns", n, self.a.ncols()),
            ("QP constraint bounds", self.a.nrows(), self.b.len()),
            ("QP starting point", n, x0.len()),
        ] {
            if expected != got {
                return Err(Error::Dimension { what, expected, got });
            }
        }
        Ok(())
    }
}

/// Solve from `x0`, which must satisfy the constraints within `tol`.
pub fn solve_ineq_qp(qp: &IneqQp, x0: &DVector<f64>, tol: f64, max_iter: usize) -> Result<IneqQpSolution> {
    qp.validate(x0)?;
    let n = x0.len();
    let k = qp.a.nrows();
    let scale = qp.h.amax().max(1.0);
    if qp.infeasibility(x0) > tol * (1.0 + qp.b.amax()) {
        return Err(Error::InvalidProblem("active-set QP started from an infeasible point".into()));
    }
    let mut x = x0.clone();
    let mut working: Vec<usize> = Vec::new();
    let mut multipliers = DVector::zeros(k);

    for it in 0..max_iter {
        let w = working.len();
        let mut kkt = DMatrix::zeros(n + w, n + w);
        kkt.view_mut((0, 0), (n, n)).copy_from(&qp.h);
        for (j, &row) in working.iter().enumerate() {
            for c in 0..n {
                kkt[(n + j, c)] = qp.a[(row, c)];
                kkt[(c, n + j)] = qp.a[(row, c)];
            }
        }
        let mut rhs = DVector::zeros(n + w);
        rhs.rows_mut(0, n).copy_from(&(-(&qp.h * &x + &qp.g)));
        let Some(sol) = kkt.lu().solve(&rhs) else {
            // Dependent working rows: drop the newest and retry.
            if working.pop().is_none() {
                return Err(Error::InvalidProblem("active-set QP Hessian is singular".into()));
            }
            continue;
        };
        let p = sol.rows(0, n).into_owned();
        let mu = sol.rows(n, w).into_owned();

        if p.amax() <= tol * (1.0 + x.amax()) {
            let (worst, min_mu) = mu
                .iter()
                .enumerate()
                .fold((usize::MAX, -tol * scale), |acc, (j, &v)| if v < acc.1 { (j, v) } else { acc });
            if worst == usize::MAX || min_mu >= -tol * scale {
                multipliers.fill(0.0);
                for (j, &row) in working.iter().enumerate() {
                    multipliers[row] = mu[j].max(0.0);
                }
                return Ok(IneqQpSolution {
                    objective: qp.objective(&x),
                    x,
                    multipliers,
                    iterations: it + 1,
                });
            }
            working.remove(worst);
            continue;
        }

        let p_norm = p.norm();
        let mut alpha = 1.0;
        let mut blocking = None;
        for row in 0..k {
            if working.contains(&row) {
                continue;
            }
            let ap = qp.a.row(row).dot(&p.transpose());
            // Rows in the span of the working set have `ap ≈ 0` up to rounding.
            if ap > 1e-10 * qp.a.row(row).norm() * p_norm {
                let slack = (qp.b[row] - qp.a.row(row).dot(&x.transpose())).max(0.0);
                let step = slack / ap;
                if step < alpha {
                    alpha = step;
                    blocking = Some(row);
                }
            }
        }
        x += &p * alpha;
        if let Some(row) = blocking {
            working.push(row);
        }
    }
    Err(Error::NoConvergence {
        solver: "active-set QP",
        iterations: max_iter,
        residual: f64::NAN,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Best KKT point over all subsets of constraints treated as equalities.
    fn enumerate(qp: &IneqQp) -> f64 {
        let n = qp.h.nrows();
        let k = qp.a.nrows();
        let mut best = f64::INFINITY;
        for mask in 0u32..(1 << k) {
            let rows: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
            if rows.len() > n {
                continue;
            }
            let w = rows.len();
            let mut kkt = DMatrix::zeros(n + w, n + w);
            kkt.view_mut((0, 0), (n, n)).copy_from(&qp.h);
            let mut rhs = DVector::zeros(n + w);
            rhs.rows_mut(0, n).copy_from(&(-&qp.g));
            for (j, &r) in rows.iter().enumerate() {
                for c in 0..n {
                    kkt[(n + j, c)] = qp.a[(r, c)];
                    kkt[(c, n + j)] = qp.a[(r, c)];
                }
                rhs[n + j] = qp.b[r];
            }
            let Some(sol) = kkt.lu().solve(&rhs) else { continue };
            let x = sol.rows(0, n).into_owned();
            if qp.infeasibility(&x) <= 1e-9 {
                best = best.min(qp.objective(&x));
            }
        }
        best
    }

    fn random_qp(rng: &mut ChaCha8Rng, n: usize, k: usize) -> IneqQp {
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        IneqQp {
            h: &m * m.transpose() + DMatrix::identity(n, n) * 0.1,
            g: DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0)),
            a: DMatrix::from_fn(k, n, |_, _| rng.random_range(-1.0..1.0)),
            // The origin is feasible.
            b: DVector::from_fn(k, |_, _| rng.random_range(0.0..1.0)),
        }
    }

    #[test]
    fn matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.random_range(1..=4);
            let k = rng.random_range(1..=7);
            let qp = random_qp(&mut rng, n, k);
            let sol = solve_ineq_qp(&qp, &DVector::zeros(n), 1e-10, 500).unwrap();
            let oracle = enumerate(&qp);
            assert!(qp.infeasibility(&sol.x) <= 1e-9);
            assert!((sol.objective - oracle).abs() <= 1e-8 * (1.0 + oracle.abs()), "{} vs {oracle}", sol.objective);
            // Stationarity with the reported multipliers.
            let grad = &qp.h * &sol.x + &qp.g + qp.a.transpose() * &sol.multipliers;
            assert!(grad.amax() <= 1e-7);
        }
    }

    #[test]
    fn rejects_infeasible_start() {
        let qp = IneqQp {
            h: DMatrix::identity(1, 1),
            g: DVector::zeros(1),
            a: DMatrix::from_element(1, 1, 1.0),
            b: DVector::from_element(1, -1.0),
        };
        assert!(solve_ineq_qp(&qp, &DVector::zeros(1), 1e-9, 10).is_err());
    }
}

//! Local search over mode sequences.
//!
//! With the active set of every step fixed, `λ_a = −F_aa⁻¹(D_a x + E_a u + c_a)`
//! and the LCS is affine, so the horizon cost is a convex quadratic in the
//! stacked inputs and staying in the mode is a set of linear inequalities
//! (`λ_a ≥ 0`, `w_i ≥ 0` off the active set). Each round solves that QP; when a
//! mode inequality ends up binding with a positive multiplier the cost keeps
//! decreasing across the boundary, so that complementarity pair is flipped and
//! the search continues from the boundary point, which belongs to both modes.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};

use super::QuadCost;
use crate::lcs::{lcs_rollout_within, LcsParams, Trajectory};
use crate::solvers::active_set::{solve_ineq_qp, IneqQp};

const QP_TOL: f64 = 1e-10;
const QP_MAX_ITER: usize = 500;

#[derive(Debug, Clone)]
pub(crate) struct Refined {
    pub trajectory: Trajectory,
    pub cost: f64,
    pub rounds: usize,
    /// Stopped because no mode flip could lower the cost further.
    pub converged: bool,
}

#[derive(Clone, Copy)]
enum Row {
    Lambda(usize, usize),
    Slack(usize, usize),
    Input,
}

struct Condensed {
    qp: IneqQp,
    rows: Vec<Row>,
}

/// Stacked inputs `U` with `lo == hi` coordinates removed; `fixed` holds their values.
struct InputMap {
    free: Vec<usize>,
    fixed: DVector<f64>,
}

impl InputMap {
    fn expand(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut full = self.fixed.clone();
        for (k, &i) in self.free.iter().enumerate() {
            full[i] = v[k];
        }
        full
    }
}

fn active_sets(traj: &Trajectory, theta: &LcsParams) -> Vec<Vec<bool>> {
    (0..traj.horizon())
        .map(|t| {
            let lam = &traj.lambdas[t];
            let w = theta.lcp_offset(&traj.states[t], &traj.inputs[t]) + theta.f() * lam;
            (0..lam.len()).map(|i| lam[i] > w[i]).collect()
        })
        .collect()
}

/// Affine-in-`U` maps for a fixed mode sequence; `None` if some `F_aa` is singular.
fn condense(
    theta: &LcsParams,
    x0: &DVector<f64>,
    cost: &QuadCost,
    map: &InputMap,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    modes: &[Vec<bool>],
) -> Option<Condensed> {
    let dims = theta.dims();
    let (n, m) = (dims.n, dims.m);
    let nu = map.free.len();
    let (a, b, c, d) = (theta.a(), theta.b(), theta.c(), theta.d());
    let (dd, ee, ff, cc) = (theta.lcp_d(), theta.lcp_e(), theta.f(), theta.lcp_c());

    // x_t = S U_free + s, u_t = P U_free + p
    let mut s_mat = DMatrix::zeros(n, nu);
    let mut s_vec = x0.clone();
    let mut hess = DMatrix::zeros(nu, nu);
    let mut grad = DVector::zeros(nu);
    let mut rows_a: Vec<DVector<f64>> = Vec::new();
    let mut rows_b: Vec<f64> = Vec::new();
    let mut tags = Vec::new();
    let target = cost.target.clone().unwrap_or_else(|| DVector::zeros(n));

    for (t, active) in modes.iter().enumerate() {
        let mut p_mat = DMatrix::zeros(m, nu);
        let mut p_vec = DVector::zeros(m);
        for j in 0..m {
            let idx = t * m + j;
            match map.free.iter().position(|&f| f == idx) {
                Some(k) => p_mat[(j, k)] = 1.0,
                None => p_vec[j] = map.fixed[idx],
            }
        }
        let e = &s_vec - &target;
        hess += s_mat.transpose() * &cost.q * &s_mat * 2.0 + p_mat.transpose() * &cost.r * &p_mat * 2.0;
        grad += s_mat.transpose() * (&cost.q * &e) * 2.0 + p_mat.transpose() * (&cost.r * &p_vec) * 2.0;

        let act: Vec<usize> = (0..active.len()).filter(|&i| active[i]).collect();
        let ina: Vec<usize> = (0..active.len()).filter(|&i| !active[i]).collect();
        // Offset of the LCP in U: q = Qm U + qv
        let q_mat = dd * &s_mat + ee * &p_mat;
        let q_vec = dd * &s_vec + ee * &p_vec + cc;
        let (l_mat, l_vec) = if act.is_empty() {
            (DMatrix::zeros(0, nu), DVector::zeros(0))
        } else {
            let faa = ff.select_rows(&act).select_columns(&act);
            let lu = faa.lu();
            let l_mat = -lu.solve(&q_mat.select_rows(&act))?;
            let l_vec = -lu.solve(&q_vec.select_rows(&act))?;
            (l_mat, l_vec)
        };
        for (k, &i) in act.iter().enumerate() {
            rows_a.push(-l_mat.row(k).transpose());
            rows_b.push(l_vec[k]);
            tags.push(Row::Lambda(t, i));
        }
        if !ina.is_empty() {
            let fia = ff.select_rows(&ina).select_columns(&act);
            let w_mat = q_mat.select_rows(&ina) + &fia * &l_mat;
            let w_vec = q_vec.select_rows(&ina) + &fia * &l_vec;
            for (k, &i) in ina.iter().enumerate() {
                rows_a.push(-w_mat.row(k).transpose());
                rows_b.push(w_vec[k]);
                tags.push(Row::Slack(t, i));
            }
        }
        let c_act = c.select_columns(&act);
        let next_mat = a * &s_mat + b * &p_mat + &c_act * &l_mat;
        let next_vec = a * &s_vec + b * &p_vec + &c_act * &l_vec + d;
        s_mat = next_mat;
        s_vec = next_vec;
    }
    let e = &s_vec - &target;
    hess += s_mat.transpose() * &cost.q_t * &s_mat * 2.0;
    grad += s_mat.transpose() * (&cost.q_t * &e) * 2.0;
    hess = (&hess + hess.transpose()) * 0.5;

    for (k, &i) in map.free.iter().enumerate() {
        let j = i % m;
        let mut up = DVector::zeros(nu);
        up[k] = 1.0;
        rows_a.push(up.clone());
        rows_b.push(hi[j]);
        tags.push(Row::Input);
        rows_a.push(-up);
        rows_b.push(-lo[j]);
        tags.push(Row::Input);
    }
    let a_mat = DMatrix::from_fn(rows_a.len(), nu, |r, col| rows_a[r][col]);
    Some(Condensed {
        qp: IneqQp {
            h: hess,
            g: grad,
            a: a_mat,
            b: DVector::from_vec(rows_b),
        },
        rows: tags,
    })
}

/// Improve `inputs` (inside `[lo, hi]` per step) by mode-wise QPs and single flips.
pub(crate) fn refine_modes(
    theta: &LcsParams,
    x0: &DVector<f64>,
    cost: &QuadCost,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    inputs: &[DVector<f64>],
    max_rounds: usize,
) -> Option<Refined> {
    let m = lo.len();
    let horizon = inputs.len();
    let mut traj = lcs_rollout_within(theta, x0, inputs, super::prediction_bound(x0)).ok()?;
    let mut best_cost = cost.horizon_cost(&traj.states, &traj.inputs);
    let mut modes = active_sets(&traj, theta);
    let mut current = DVector::from_iterator(horizon * m, inputs.iter().flat_map(|u| u.iter().copied()));
    let free: Vec<usize> = (0..horizon * m).filter(|&i| hi[i % m] > lo[i % m]).collect();
    let map = InputMap {
        free: free.clone(),
        fixed: current.clone(),
    };
    let mut visited: HashSet<Vec<Vec<bool>>> = HashSet::new();
    visited.insert(modes.clone());
    if free.is_empty() {
        return Some(Refined {
            trajectory: traj,
            cost: best_cost,
            rounds: 0,
            converged: true,
        });
    }

    for round in 0..max_rounds {
        let Some(mut cond) = condense(theta, x0, cost, &map, lo, hi, &modes) else {
            return Some(Refined {
                trajectory: traj,
                cost: best_cost,
                rounds: round,
                converged: false,
            });
        };
        let start = DVector::from_iterator(free.len(), free.iter().map(|&i| current[i]));
        // Classification and LCP rounding leave the start a hair outside its mode.
        let slack = &cond.qp.a * &start;
        let mut consistent = true;
        for r in 0..cond.qp.b.len() {
            if slack[r] > cond.qp.b[r] {
                consistent &= slack[r] - cond.qp.b[r] <= 1e-7 * (1.0 + cond.qp.b[r].abs());
                cond.qp.b[r] = slack[r];
            }
        }
        if !consistent {
            return Some(Refined {
                trajectory: traj,
                cost: best_cost,
                rounds: round,
                converged: false,
            });
        }
        let Ok(sol) = solve_ineq_qp(&cond.qp, &start, QP_TOL, QP_MAX_ITER) else {
            return Some(Refined {
                trajectory: traj,
                cost: best_cost,
                rounds: round,
                converged: false,
            });
        };
        let candidate = map.expand(&sol.x);
        let us: Vec<DVector<f64>> = (0..horizon)
            .map(|t| DVector::from_iterator(m, (0..m).map(|j| candidate[t * m + j].clamp(lo[j], hi[j]))))
            .collect();
        if let Ok(tj) = lcs_rollout_within(theta, x0, &us, super::prediction_bound(x0)) {
            let c = cost.horizon_cost(&tj.states, &tj.inputs);
            if c <= best_cost {
                best_cost = c;
                traj = tj;
            }
        }
        current = candidate;

        let scale = sol.multipliers.amax().max(1.0);
        let flip = cond
            .rows
            .iter()
            .zip(sol.multipliers.iter())
            .filter(|(row, mu)| !matches!(row, Row::Input) && **mu > 1e-9 * scale)
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(row, _)| *row);
        let (t, i) = match flip {
            Some(Row::Lambda(t, i)) | Some(Row::Slack(t, i)) => (t, i),
            _ => {
                return Some(Refined {
                    trajectory: traj,
                    cost: best_cost,
                    rounds: round + 1,
                    converged: true,
                })
            }
        };
        modes[t][i] = !modes[t][i];
        if !visited.insert(modes.clone()) {
            return Some(Refined {
                trajectory: traj,
                cost: best_cost,
                rounds: round + 1,
                converged: true,
            });
        }
    }
    Some(Refined {
        trajectory: traj,
        cost: best_cost,
        rounds: max_rounds,
        converged: false,
    })
}

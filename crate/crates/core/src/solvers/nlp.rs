//! Box- and equality-constrained smooth nonlinear programs.
//!
//! Augmented Lagrangian on the equalities; each subproblem is minimized over
//! the box by projected L-BFGS with an Armijo backtracking search along the
//! projected path. The penalty grows ×10 per outer round.

use std::collections::VecDeque;

use nalgebra::DVector;

use crate::error::{Error, Result};

pub const DEFAULT_NLP_TOL: f64 = 1e-4;
pub const DEFAULT_NLP_MAX_INNER: usize = 500;
pub const DEFAULT_NLP_MAX_OUTER: usize = 8;

/// Sparse Jacobian entry `(row, col, value)`.
pub type JacobianEntry = (usize, usize, f64);

/// Evaluators for a transcribed program. Implementations must be deterministic.
pub trait NlpFunctions {
    fn dim(&self) -> usize;
    fn num_equalities(&self) -> usize;
    /// Objective value; the gradient is written into `grad`.
    fn objective(&self, z: &[f64], grad: &mut [f64]) -> f64;
    /// Equality residuals `h(z)` into `h`, and the Jacobian of `h` appended to `jac`.
    fn equalities(&self, z: &[f64], h: &mut [f64], jac: &mut Vec<JacobianEntry>);
}

pub struct NlpProblem<'a> {
    pub functions: &'a dyn NlpFunctions,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub initial: Vec<f64>,
    /// Multipliers and penalty to resume from, e.g. along a continuation.
    pub warm: Option<NlpWarmStart>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NlpWarmStart {
    pub multipliers: Vec<f64>,
    pub penalty: f64,
}

impl NlpProblem<'_> {
    fn validate(&self) -> Result<()> {
        let n = self.functions.dim();
        for (what, len) in [
            ("NLP lower bounds", self.lower.len()),
            ("NLP upper bounds", self.upper.len()),
            ("NLP initial point", self.initial.len()),
        ] {
            if len != n {
                return Err(Error::Dimension {
                    what,
                    expected: n,
                    got: len,
                });
            }
        }
        if let Some(i) = (0..n).find(|&i| !(self.lower[i] <= self.upper[i])) {
            return Err(Error::InvalidProblem(format!(
                "empty box for variable {i}: [{}, {}]",
                self.lower[i], self.upper[i]
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NlpSettings {
    pub tol: f64,
    pub max_inner: usize,
    pub max_outer: usize,
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    pub memory: usize,
}

impl Default for NlpSettings {
    fn default() -> Self {
        Self {
            tol: DEFAULT_NLP_TOL,
            max_inner: DEFAULT_NLP_MAX_INNER,
            max_outer: DEFAULT_NLP_MAX_OUTER,
            initial_penalty: 10.0,
            penalty_growth: 10.0,
            memory: 8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NlpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    /// `‖h(x)‖_∞`
    pub violation: f64,
    /// Projected-gradient norm of the final augmented objective.
    pub stationarity: f64,
    pub iterations: usize,
    /// False when the iteration caps were hit first; `x` is still the best iterate.
    pub converged: bool,
    /// Multipliers and penalty at exit.
    pub warm: NlpWarmStart,
}

pub fn solve_nlp(p: &NlpProblem<'_>, tol: f64, max_iter: usize) -> Result<NlpSolution> {
    solve_nlp_with(
        p,
        &NlpSettings {
            tol,
            max_inner: max_iter,
            ..NlpSettings::default()
        },
    )
}

pub fn solve_nlp_with(p: &NlpProblem<'_>, settings: &NlpSettings) -> Result<NlpSolution> {
    p.validate()?;
    if !(settings.tol > 0.0) {
        return Err(Error::InvalidProblem(format!(
            "NLP tolerance must be positive, got {}",
            settings.tol
        )));
    }
    let f = p.functions;
    let n = f.dim();
    let neq = f.num_equalities();
    let mut z: Vec<f64> = (0..n).map(|i| p.initial[i].clamp(p.lower[i], p.upper[i])).collect();

    let (mut mult, mut penalty) = match &p.warm {
        Some(w) if w.multipliers.len() == neq => (w.multipliers.clone(), w.penalty.max(settings.initial_penalty)),
        _ => (vec![0.0; neq], settings.initial_penalty),
    };
    let mut h = vec![0.0; neq];
    let mut jac = Vec::new();
    let mut iterations = 0;
    let mut stationarity = f64::INFINITY;
    let mut best: Option<(f64, f64, Vec<f64>)> = None;

    for _outer in 0..settings.max_outer.max(1) {
        let mut eval =
            |x: &[f64], grad: &mut [f64]| -> f64 { augmented_value(f, x, &mult, penalty, grad, &mut h, &mut jac) };
        let inner = minimize_box(&mut eval, &mut z, &p.lower, &p.upper, settings);
        iterations += inner.iterations;
        stationarity = inner.stationarity;

        jac.clear();
        f.equalities(&z, &mut h, &mut jac);
        let violation = h.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let mut scratch = vec![0.0; n];
        let obj = f.objective(&z, &mut scratch);
        let better = match &best {
            None => true,
            Some((bv, bo, _)) => {
                let tied = violation <= 10.0 * settings.tol && *bv <= 10.0 * settings.tol;
                if tied { obj < *bo } else { violation < *bv }
            }
        };
        if better {
            best = Some((violation, obj, z.clone()));
        }
        if violation <= 10.0 * settings.tol && stationarity <= settings.tol {
            return Ok(NlpSolution {
                x: DVector::from_vec(z),
                objective: obj,
                violation,
                stationarity,
                iterations,
                converged: true,
                warm: NlpWarmStart {
                    multipliers: mult,
                    penalty,
                },
            });
        }
        for j in 0..neq {
            mult[j] += penalty * h[j];
        }
        if violation > 10.0 * settings.tol {
            penalty = (penalty * settings.penalty_growth).min(1e10);
        }
    }

    let (violation, objective, x) = best.expect("at least one outer round");
    Ok(NlpSolution {
        x: DVector::from_vec(x),
        objective,
        violation,
        stationarity,
        iterations,
        converged: false,
        warm: NlpWarmStart {
            multipliers: mult,
            penalty,
        },
    })
}

/// Augmented Lagrangian `f + multᵀh + ½ρ‖h‖²` and its gradient; `h` and `jac` are left filled.
fn augmented_value(
    f: &dyn NlpFunctions,
    x: &[f64],
    mult: &[f64],
    penalty: f64,
    grad: &mut [f64],
    h: &mut [f64],
    jac: &mut Vec<JacobianEntry>,
) -> f64 {
    let mut value = f.objective(x, grad);
    jac.clear();
    if !mult.is_empty() {
        f.equalities(x, h, jac);
        for j in 0..mult.len() {
            value += mult[j] * h[j] + 0.5 * penalty * h[j] * h[j];
        }
        for &(row, col, v) in jac.iter() {
            grad[col] += v * (mult[row] + penalty * h[row]);
        }
    }
    value
}

struct InnerResult {
    iterations: usize,
    stationarity: f64,
}

fn projected_gradient_norm(z: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    z.iter()
        .zip(g)
        .zip(lo.iter().zip(hi))
        .fold(0.0, |acc, ((&zi, &gi), (&l, &u))| {
            acc.max(((zi - gi).clamp(l, u) - zi).abs())
        })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn minimize_box(
    eval: &mut dyn FnMut(&[f64], &mut [f64]) -> f64,
    z: &mut [f64],
    lo: &[f64],
    hi: &[f64],
    settings: &NlpSettings,
) -> InnerResult {
    let n = z.len();
    let mut g = vec![0.0; n];
    let mut fval = eval(z, &mut g);
    let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(settings.memory);
    let mut d = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut g_trial = vec![0.0; n];
    let mut alpha = vec![0.0; settings.memory];
    let mut stationarity = projected_gradient_norm(z, &g, lo, hi);

    for it in 0..settings.max_inner {
        if stationarity <= settings.tol {
            return InnerResult {
                iterations: it,
                stationarity,
            };
        }
        // Variables pinned at a bound with the gradient pushing outward stay fixed.
        let fixed: Vec<bool> = (0..n)
            .map(|i| (z[i] <= lo[i] && g[i] > 0.0) || (z[i] >= hi[i] && g[i] < 0.0))
            .collect();
        for i in 0..n {
            d[i] = if fixed[i] { 0.0 } else { g[i] };
        }
        // Two-loop recursion on the free subspace.
        for (k, (s, y, rho)) in memory.iter().enumerate().rev() {
            let a = rho * masked_dot(s, &d, &fixed);
            alpha[k] = a;
            for i in 0..n {
                if !fixed[i] {
                    d[i] -= a * y[i];
                }
            }
        }
        if let Some((s, y, _)) = memory.back() {
            let yy = masked_dot(y, y, &fixed);
            let sy = masked_dot(s, y, &fixed);
            if yy > 0.0 && sy > 0.0 {
                let scale = sy / yy;
                d.iter_mut().for_each(|v| *v *= scale);
            }
        }
        for (k, (s, y, rho)) in memory.iter().enumerate() {
            let b = rho * masked_dot(y, &d, &fixed);
            for i in 0..n {
                if !fixed[i] {
                    d[i] += (alpha[k] - b) * s[i];
                }
            }
        }
        d.iter_mut().for_each(|v| *v = -*v);
        if !(dot(&g, &d) < 0.0) {
            memory.clear();
            for i in 0..n {
                d[i] = if fixed[i] { 0.0 } else { -g[i] };
            }
        }
        let mut step = if memory.is_empty() {
            let gn = d.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            (1.0 / gn.max(1e-12)).min(1.0)
        } else {
            1.0
        };

        let mut accepted = false;
        for _ in 0..50 {
            for i in 0..n {
                trial[i] = (z[i] + step * d[i]).clamp(lo[i], hi[i]);
            }
            let f_trial = eval(&trial, &mut g_trial);
            let decrease: f64 = (0..n).map(|i| g[i] * (trial[i] - z[i])).sum();
            if f_trial.is_finite() && f_trial <= fval + 1e-4 * decrease.min(0.0) && decrease <= 0.0 {
                let s: Vec<f64> = (0..n).map(|i| trial[i] - z[i]).collect();
                let y: Vec<f64> = (0..n).map(|i| g_trial[i] - g[i]).collect();
                let sy = dot(&s, &y);
                if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
                    if memory.len() == settings.memory {
                        memory.pop_front();
                    }
                    memory.push_back((s, y, 1.0 / sy));
                }
                z.copy_from_slice(&trial);
                g.copy_from_slice(&g_trial);
                fval = f_trial;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        stationarity = projected_gradient_norm(z, &g, lo, hi);
        if !accepted {
            if memory.is_empty() {
                // Steepest descent made no progress: numerically stationary.
                return InnerResult {
                    iterations: it + 1,
                    stationarity,
                };
            }
            memory.clear();
        }
    }
    InnerResult {
        iterations: settings.max_inner,
        stationarity,
    }
}

fn masked_dot(a: &[f64], b: &[f64], fixed: &[bool]) -> f64 {
    a.iter()
        .zip(b)
        .zip(fixed)
        .filter(|(_, &f)| !f)
        .map(|((x, y), _)| x * y)
        .sum()
}

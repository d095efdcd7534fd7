//! Trust-region MPC on an LCS by direct transcription.
//!
//! The decision vector stacks `x_1..x_T`, `u_0..u_{T-1}`, `λ_0..λ_{T-1}`,
//! the complementarity slacks `w_t = D x_t + E u_t + F λ_t + c` and the
//! relaxation slacks `s_t ∈ [0, σ]`, with equalities
//!
//! ```text
//! x_{t+1} = A x_t + B u_t + C λ_t + d
//! w_t     = D x_t + E u_t + F λ_t + c
//! λ_t ∘ w_t + s_t = σ
//! ```
//!
//! so `0 ≤ λ_t ∘ w_t ≤ σ`. The program is re-solved for a decreasing sequence
//! of `σ`, each stage starting from the previous solution. The relaxed plan
//! then seeds a local search over mode sequences (see `refine`) that returns
//! inputs whose exactly simulated trajectory is the reported prediction, so
//! the final plan satisfies complementarity exactly.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::lcs::{lcs_rollout_within, LcsParams, Trajectory, EXPLOSION_BOUND};
use crate::linalg::{is_symmetric, min_sym_eigenvalue};
use crate::rollout::{PlanRecord, Policy, Rollout};
use crate::solvers::nlp::{solve_nlp_with, JacobianEntry, NlpFunctions, NlpProblem, NlpSettings};

mod refine;

/// Quadratic tracking cost `Σ (x−x̄)ᵀQ(x−x̄) + uᵀRu + (x_T−x̄)ᵀQ_T(x_T−x̄)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadCost {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q_t: DMatrix<f64>,
    pub target: Option<DVector<f64>>,
}

impl QuadCost {
    pub fn identity(n: usize, m: usize) -> Self {
        Self {
            q: DMatrix::identity(n, n),
            r: DMatrix::identity(m, m),
            q_t: DMatrix::identity(n, n),
            target: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.q.nrows();
        let m = self.r.nrows();
        for (what, mat, dim, strict) in [("Q", &self.q, n, false), ("R", &self.r, m, true), ("Q_T", &self.q_t, n, false)] {
            if mat.nrows() != dim || mat.ncols() != dim {
                return Err(Error::InvalidProblem(format!("{what} must be {dim}x{dim}")));
            }
            if !is_symmetric(mat, 1e-10) {
                return Err(Error::InvalidProblem(format!("{what} is not symmetric")));
            }
            let low = min_sym_eigenvalue(mat);
            if (strict && !(low > 0.0)) || (!strict && low < -1e-12) {
                return Err(Error::InvalidProblem(format!("{what} has eigenvalue {low:.3e}")));
            }
        }
        if let Some(t) = &self.target {
            if t.len() != n {
                return Err(Error::Dimension {
                    what: "cost target",
                    expected: n,
                    got: t.len(),
                });
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.q.nrows()
    }

    pub fn m(&self) -> usize {
        self.r.nrows()
    }

    fn offset(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.target {
            Some(t) => x - t,
            None => x.clone(),
        }
    }

    pub fn state_cost(&self, x: &DVector<f64>) -> f64 {
        let e = self.offset(x);
        e.dot(&(&self.q * &e))
    }

    pub fn input_cost(&self, u: &DVector<f64>) -> f64 {
        u.dot(&(&self.r * u))
    }

    pub fn stage(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.state_cost(x) + self.input_cost(u)
    }

    pub fn terminal(&self, x: &DVector<f64>) -> f64 {
        let e = self.offset(x);
        e.dot(&(&self.q_t * &e))
    }

    /// Planning objective over `x_0..x_T` and `u_0..u_{T-1}`.
    pub fn horizon_cost(&self, states: &[DVector<f64>], inputs: &[DVector<f64>]) -> f64 {
        let t = inputs.len();
        let running: f64 = (0..t).map(|k| self.stage(&states[k], &inputs[k])).sum();
        running + self.terminal(&states[t])
    }
}

/// Per-dimension input box `[ū − Δ, ū + Δ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrustRegion {
    pub center: DVector<f64>,
    pub half_width: DVector<f64>,
}

impl TrustRegion {
    pub fn new(center: DVector<f64>, half_width: DVector<f64>) -> Result<Self> {
        if center.len() != half_width.len() {
            return Err(Error::Dimension {
                what: "trust region half-width",
                expected: center.len(),
                got: half_width.len(),
            });
        }
        if half_width.iter().any(|d| !(*d >= 0.0)) || center.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidProblem("trust region needs finite center and Δ ≥ 0".into()));
        }
        Ok(Self { center, half_width })
    }

    /// Box `[-bound, bound]^m`.
    pub fn symmetric(m: usize, bound: f64) -> Self {
        Self {
            center: DVector::zeros(m),
            half_width: DVector::from_element(m, bound),
        }
    }

    pub fn lower(&self) -> DVector<f64> {
        &self.center - &self.half_width
    }

    pub fn upper(&self) -> DVector<f64> {
        &self.center + &self.half_width
    }

    pub fn contains(&self, u: &DVector<f64>) -> bool {
        let (lo, hi) = (self.lower(), self.upper());
        u.iter().enumerate().all(|(i, v)| *v >= lo[i] && *v <= hi[i])
    }

    pub fn project(&self, u: &DVector<f64>) -> DVector<f64> {
        let (lo, hi) = (self.lower(), self.upper());
        DVector::from_iterator(u.len(), u.iter().enumerate().map(|(i, v)| v.clamp(lo[i], hi[i])))
    }
}

/// Dimension-wise mean and `η` times the population standard deviation of `inputs`.
pub fn trust_region_from_inputs<'a, I>(inputs: I, eta: f64) -> Result<TrustRegion>
where
    I: IntoIterator<Item = &'a DVector<f64>>,
{
    let inputs: Vec<&DVector<f64>> = inputs.into_iter().collect();
    if inputs.len() < 2 {
        return Err(Error::DegenerateBuffer(inputs.len()));
    }
    let m = inputs[0].len();
    let count = inputs.len() as f64;
    let mut mean = DVector::zeros(m);
    for u in &inputs {
        mean += *u;
    }
    mean /= count;
    let mut var = DVector::zeros(m);
    for u in &inputs {
        let e = *u - &mean;
        var += e.component_mul(&e);
    }
    var /= count;
    TrustRegion::new(mean, var.map(f64::sqrt) * eta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcSettings {
    /// planning horizon T
    pub horizon: usize,
    /// complementarity relaxation levels, solved in order
    pub sigma_schedule: Vec<f64>,
    pub nlp_tol: f64,
    pub nlp_max_inner: usize,
    pub nlp_max_outer: usize,
    /// number of starting points per plan (the first is the warm or cold start)
    pub multi_start: usize,
    /// return the initial guess when its exactly simulated cost beats the solver's plan
    pub keep_better_guess: bool,
    /// finish with a local search over mode sequences (exact complementarity)
    pub refine_modes: bool,
    /// cap on mode flips in that search
    pub max_mode_flips: usize,
}

impl Default for MpcSettings {
    fn default() -> Self {
        Self {
            horizon: 5,
            sigma_schedule: vec![1e-1, 1e-2],
            nlp_tol: 1e-4,
            nlp_max_inner: 50,
            nlp_max_outer: 3,
            multi_start: 1,
            keep_better_guess: true,
            refine_modes: true,
            max_mode_flips: 100,
        }
    }
}

impl MpcSettings {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::config("mpc.horizon", "must be at least 1"));
        }
        if self.sigma_schedule.is_empty() || self.sigma_schedule.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::config("mpc.sigma_schedule", "needs at least one positive level"));
        }
        if !(self.nlp_tol > 0.0) || self.nlp_max_inner == 0 || self.nlp_max_outer == 0 {
            return Err(Error::config("mpc.nlp_tol", "tolerance and iteration caps must be positive"));
        }
        if self.multi_start == 0 {
            return Err(Error::config("mpc.multi_start", "must be at least 1"));
        }
        Ok(())
    }

    fn nlp(&self) -> NlpSettings {
        NlpSettings {
            tol: self.nlp_tol,
            max_inner: self.nlp_max_inner,
            max_outer: self.nlp_max_outer,
            ..NlpSettings::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcPlan {
    pub inputs: Vec<DVector<f64>>,
    /// predicted `x_0..x_T`
    pub states: Vec<DVector<f64>>,
    pub lambdas: Vec<DVector<f64>>,
    pub objective: f64,
    pub sigma_final: f64,
    pub iterations: usize,
    /// some stage of the relaxation schedule stopped on an iteration cap
    pub degraded: bool,
    pub fallback: bool,
}

impl MpcPlan {
    pub fn first_input(&self) -> &DVector<f64> {
        &self.inputs[0]
    }
}

#[derive(Clone, Copy)]
struct Layout {
    n: usize,
    m: usize,
    r: usize,
    t: usize,
}

impl Layout {
    fn x(&self, t: usize) -> usize {
        (t - 1) * self.n
    }
    fn u(&self, t: usize) -> usize {
        self.t * self.n + t * self.m
    }
    fn lam(&self, t: usize) -> usize {
        self.t * (self.n + self.m) + t * self.r
    }
    fn w(&self, t: usize) -> usize {
        self.t * (self.n + self.m + self.r) + t * self.r
    }
    fn s(&self, t: usize) -> usize {
        self.t * (self.n + self.m + 2 * self.r) + t * self.r
    }
    fn dim(&self) -> usize {
        self.t * (self.n + self.m + 3 * self.r)
    }
    fn dyn_row(&self, t: usize) -> usize {
        t * self.n
    }
    fn lcp_row(&self, t: usize) -> usize {
        self.t * self.n + t * self.r
    }
    fn comp_row(&self, t: usize) -> usize {
        self.t * (self.n + self.r) + t * self.r
    }
    fn rows(&self) -> usize {
        self.t * (self.n + 2 * self.r)
    }
}

struct Transcription<'a> {
    theta: &'a LcsParams,
    cost: &'a QuadCost,
    x0: &'a DVector<f64>,
    sigma: f64,
    layout: Layout,
}

impl Transcription<'_> {
    fn state<'z>(&'z self, z: &'z [f64], t: usize) -> &'z [f64] {
        if t == 0 {
            self.x0.as_slice()
        } else {
            let i = self.layout.x(t);
            &z[i..i + self.layout.n]
        }
    }

    fn target(&self, i: usize) -> f64 {
        self.cost.target.as_ref().map_or(0.0, |t| t[i])
    }
}

fn quad_form(mat: &DMatrix<f64>, v: &[f64], grad: &mut [f64]) -> f64 {
    let k = v.len();
    let mut value = 0.0;
    for i in 0..k {
        let mut row = 0.0;
        for j in 0..k {
            row += mat[(i, j)] * v[j];
        }
        value += v[i] * row;
        // Q is symmetric, so ∇ vᵀQv = 2Qv.
        grad[i] = 2.0 * row;
    }
    value
}

impl NlpFunctions for Transcription<'_> {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn num_equalities(&self) -> usize {
        self.layout.rows()
    }

    fn objective(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        let l = &self.layout;
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut value = 0.0;
        let mut e = vec![0.0; l.n];
        let mut ge = vec![0.0; l.n.max(l.m)];
        for t in 0..=l.t {
            let x = self.state(z, t);
            for i in 0..l.n {
                e[i] = x[i] - self.target(i);
            }
            let weight = if t == l.t { &self.cost.q_t } else { &self.cost.q };
            // x_0 is fixed; its running cost is constant but kept in the objective value.
            value += quad_form(weight, &e, &mut ge[..l.n]);
            if t > 0 {
                let xi = l.x(t);
                grad[xi..xi + l.n].copy_from_slice(&ge[..l.n]);
            }
            if t < l.t {
                let ui = l.u(t);
                value += quad_form(&self.cost.r, &z[ui..ui + l.m], &mut ge[..l.m]);
                grad[ui..ui + l.m].copy_from_slice(&ge[..l.m]);
            }
        }
        value
    }

    fn equalities(&self, z: &[f64], h: &mut [f64], jac: &mut Vec<JacobianEntry>) {
        let l = &self.layout;
        let th = self.theta;
        let (a, b, c, d) = (th.a(), th.b(), th.c(), th.d());
        let (dd, ee, ff, cc) = (th.lcp_d(), th.lcp_e(), th.f(), th.lcp_c());
        for t in 0..l.t {
            let x = self.state(z, t);
            let (ui, li, wi, si) = (l.u(t), l.lam(t), l.w(t), l.s(t));
            let u = &z[ui..ui + l.m];
            let lam = &z[li..li + l.r];
            let w = &z[wi..wi + l.r];
            let row0 = l.dyn_row(t);
            let next = l.x(t + 1);
            for i in 0..l.n {
                let mut v = z[next + i] - d[i];
                jac.push((row0 + i, next + i, 1.0));
                for j in 0..l.n {
                    v -= a[(i, j)] * x[j];
                    if t > 0 {
                        jac.push((row0 + i, l.x(t) + j, -a[(i, j)]));
                    }
                }
                for j in 0..l.m {
                    v -= b[(i, j)] * u[j];
                    jac.push((row0 + i, ui + j, -b[(i, j)]));
                }
                for j in 0..l.r {
                    v -= c[(i, j)] * lam[j];
                    jac.push((row0 + i, li + j, -c[(i, j)]));
                }
                h[row0 + i] = v;
            }
            let row1 = l.lcp_row(t);
            let row2 = l.comp_row(t);
            for i in 0..l.r {
                let mut v = w[i] - cc[i];
                jac.push((row1 + i, wi + i, 1.0));
                for j in 0..l.n {
                    v -= dd[(i, j)] * x[j];
                    if t > 0 {
                        jac.push((row1 + i, l.x(t) + j, -dd[(i, j)]));
                    }
                }
                for j in 0..l.m {
                    v -= ee[(i, j)] * u[j];
                    jac.push((row1 + i, ui + j, -ee[(i, j)]));
                }
                for j in 0..l.r {
                    v -= ff[(i, j)] * lam[j];
                    jac.push((row1 + i, li + j, -ff[(i, j)]));
                }
                h[row1 + i] = v;

                h[row2 + i] = lam[i] * w[i] + z[si + i] - self.sigma;
                jac.push((row2 + i, li + i, w[i]));
                jac.push((row2 + i, wi + i, lam[i]));
                jac.push((row2 + i, si + i, 1.0));
            }
        }
    }
}

/// Exact simulation of `u_seq` through `θ`; `None` if the model blows up.
/// Largest predicted state norm the planner accepts. Relative to `x0`, since episodes of an
/// unstable system legitimately reach large states.
pub(crate) fn prediction_bound(x0: &DVector<f64>) -> f64 {
    EXPLOSION_BOUND * x0.norm().max(1.0)
}

fn simulate(theta: &LcsParams, x0: &DVector<f64>, inputs: &[DVector<f64>]) -> Option<Trajectory> {
    lcs_rollout_within(theta, x0, inputs, prediction_bound(x0)).ok()
}

fn pack(layout: &Layout, theta: &LcsParams, traj: &Trajectory, sigma: f64) -> Vec<f64> {
    let mut z = vec![0.0; layout.dim()];
    for t in 0..layout.t {
        let (x, u, lam) = (&traj.states[t], &traj.inputs[t], &traj.lambdas[t]);
        let xi = layout.x(t + 1);
        z[xi..xi + layout.n].copy_from_slice(traj.states[t + 1].as_slice());
        let ui = layout.u(t);
        z[ui..ui + layout.m].copy_from_slice(u.as_slice());
        let w = (theta.lcp_offset(x, u) + theta.f() * lam).map(|v| v.max(0.0));
        for i in 0..layout.r {
            let l = lam[i].max(0.0);
            z[layout.lam(t) + i] = l;
            z[layout.w(t) + i] = w[i];
            z[layout.s(t) + i] = (sigma - l * w[i]).clamp(0.0, sigma);
        }
    }
    z
}

fn unpack(layout: &Layout, x0: &DVector<f64>, z: &[f64]) -> (Vec<DVector<f64>>, Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let mut states = vec![x0.clone()];
    let mut inputs = Vec::with_capacity(layout.t);
    let mut lambdas = Vec::with_capacity(layout.t);
    for t in 0..layout.t {
        let xi = layout.x(t + 1);
        states.push(DVector::from_column_slice(&z[xi..xi + layout.n]));
        let ui = layout.u(t);
        inputs.push(DVector::from_column_slice(&z[ui..ui + layout.m]));
        let li = layout.lam(t);
        lambdas.push(DVector::from_column_slice(&z[li..li + layout.r]));
    }
    (states, inputs, lambdas)
}

fn initial_inputs(tr: &TrustRegion, horizon: usize, warm: Option<&MpcPlan>) -> Vec<DVector<f64>> {
    match warm {
        Some(plan) if !plan.inputs.is_empty() => (0..horizon)
            .map(|k| tr.project(&plan.inputs[(k + 1).min(plan.inputs.len() - 1)]))
            .collect(),
        _ => vec![tr.center.clone(); horizon],
    }
}

/// Solve the trust-region MPC problem from `x0`.
///
/// `warm` is the plan from the previous control step; its inputs are shifted by one.
pub fn plan(
    theta: &LcsParams,
    x0: &DVector<f64>,
    cost: &QuadCost,
    tr: &TrustRegion,
    settings: &MpcSettings,
    warm: Option<&MpcPlan>,
) -> Result<MpcPlan> {
    settings.validate()?;
    let dims = theta.dims();
    if x0.len() != dims.n || cost.n() != dims.n || cost.m() != dims.m || tr.center.len() != dims.m {
        return Err(Error::Dimension {
            what: "MPC problem",
            expected: dims.n,
            got: x0.len(),
        });
    }
    let layout = Layout {
        n: dims.n,
        m: dims.m,
        r: dims.r,
        t: settings.horizon,
    };
    let (lo_u, hi_u) = (tr.lower(), tr.upper());
    let mut lower = vec![f64::NEG_INFINITY; layout.dim()];
    let mut upper = vec![f64::INFINITY; layout.dim()];
    for t in 0..layout.t {
        for i in 0..layout.m {
            lower[layout.u(t) + i] = lo_u[i];
            upper[layout.u(t) + i] = hi_u[i];
        }
        for i in 0..layout.r {
            lower[layout.lam(t) + i] = 0.0;
            lower[layout.w(t) + i] = 0.0;
            lower[layout.s(t) + i] = 0.0;
        }
    }

    let mut starts = vec![initial_inputs(tr, layout.t, warm)];
    for k in 1..settings.multi_start {
        // Constant inputs spread across the box.
        let frac = 2.0 * k as f64 / settings.multi_start as f64 - 1.0;
        starts.push(vec![&tr.center + &tr.half_width * frac; layout.t]);
    }

    let nlp = settings.nlp();
    let mut best: Option<(f64, MpcPlan)> = None;
    for guess in starts {
        let Some(guess_traj) = simulate(theta, x0, &guess) else {
            continue;
        };
        let guess_cost = cost.horizon_cost(&guess_traj.states, &guess_traj.inputs);
        let mut z = pack(&layout, theta, &guess_traj, settings.sigma_schedule[0]);
        let mut iterations = 0;
        let mut degraded = false;
        let mut sigma_final = settings.sigma_schedule[0];
        let mut nlp_warm = None;
        for &sigma in &settings.sigma_schedule {
            for t in 0..layout.t {
                for i in 0..layout.r {
                    upper[layout.s(t) + i] = sigma;
                }
            }
            let functions = Transcription {
                theta,
                cost,
                x0,
                sigma,
                layout,
            };
            let problem = NlpProblem {
                functions: &functions,
                lower: lower.clone(),
                upper: upper.clone(),
                initial: z.clone(),
                warm: nlp_warm.take(),
            };
            let sol = solve_nlp_with(&problem, &nlp)?;
            nlp_warm = Some(sol.warm.clone());
            iterations += sol.iterations;
            degraded |= !sol.converged;
            z = sol.x.as_slice().to_vec();
            sigma_final = sigma;
        }
        let (states, inputs, lambdas) = unpack(&layout, x0, &z);
        let inputs: Vec<_> = inputs.iter().map(|u| tr.project(u)).collect();
        let (mut score, mut candidate) = if settings.refine_modes {
            let refined = refine::refine_modes(theta, x0, cost, &lo_u, &hi_u, &inputs, settings.max_mode_flips);
            let from_guess = if settings.keep_better_guess {
                refine::refine_modes(theta, x0, cost, &lo_u, &hi_u, &guess_traj.inputs, settings.max_mode_flips)
                    .filter(|g| refined.as_ref().is_none_or(|r| g.cost < r.cost))
            } else {
                None
            };
            let fallback = from_guess.is_some();
            match from_guess.or(refined) {
                Some(r) => (
                    r.cost,
                    MpcPlan {
                        inputs: r.trajectory.inputs,
                        states: r.trajectory.states,
                        lambdas: r.trajectory.lambdas,
                        objective: r.cost,
                        sigma_final: 0.0,
                        iterations: iterations + r.rounds,
                        degraded: !r.converged,
                        fallback,
                    },
                ),
                None => (
                    f64::INFINITY,
                    MpcPlan {
                        objective: cost.horizon_cost(&states, &inputs),
                        inputs,
                        states,
                        lambdas,
                        sigma_final,
                        iterations,
                        degraded: true,
                        fallback: false,
                    },
                ),
            }
        } else {
            let exact_cost = simulate(theta, x0, &inputs).map(|tj| cost.horizon_cost(&tj.states, &tj.inputs));
            (
                exact_cost.unwrap_or(f64::INFINITY),
                MpcPlan {
                    objective: cost.horizon_cost(&states, &inputs),
                    inputs,
                    states,
                    lambdas,
                    sigma_final,
                    iterations,
                    degraded,
                    fallback: false,
                },
            )
        };
        if settings.keep_better_guess && guess_cost < score {
            score = guess_cost;
            candidate = MpcPlan {
                objective: guess_cost,
                inputs: guess_traj.inputs.clone(),
                states: guess_traj.states.clone(),
                lambdas: guess_traj.lambdas.clone(),
                fallback: true,
                ..candidate
            };
        }
        if best.as_ref().is_none_or(|(s, _)| score < *s) {
            best = Some((score, candidate));
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| Error::InvalidProblem("every MPC starting point diverged under the model".into()))
}

/// Error from a closed-loop episode together with the steps completed before it.
#[derive(Debug)]
pub struct RolloutFailure {
    pub error: Error,
    pub partial: Rollout,
}

/// Receding-horizon episode: plan on `θ_g` from the true state, apply the first input to `env`.
pub fn receding_rollout(
    env: &mut Environment,
    theta_g: &LcsParams,
    cost: &QuadCost,
    tr: &TrustRegion,
    settings: &MpcSettings,
    steps: usize,
    x0: &DVector<f64>,
) -> std::result::Result<Rollout, RolloutFailure> {
    let mut rollout = Rollout {
        policy: Policy::Mpc,
        trajectory: Trajectory::new(x0.clone()),
        plans: Vec::with_capacity(steps),
    };
    if steps == 0 {
        return Err(RolloutFailure {
            error: Error::InvalidProblem("rollout horizon must be at least 1".into()),
            partial: rollout,
        });
    }
    let mut previous: Option<MpcPlan> = None;
    let mut warm_lambda: Option<DVector<f64>> = None;
    for k in 0..steps {
        let x = rollout.trajectory.final_state().clone();
        let started = Instant::now();
        let p = match plan(theta_g, &x, cost, tr, settings, previous.as_ref()) {
            Ok(p) => p,
            Err(e) => {
                return Err(RolloutFailure {
                    error: Error::at_step(k, e),
                    partial: rollout,
                })
            }
        };
        let wall_seconds = started.elapsed().as_secs_f64();
        let u = tr.project(p.first_input());
        let projected = (&u - p.first_input()).amax() > 1e-12;
        if projected {
            log::debug!("step {k}: planned input moved onto the trust region");
        }
        let (next, big_lambda) = match env.step_warm(&x, &u, warm_lambda.as_ref()) {
            Ok(v) => v,
            Err(e) => {
                return Err(RolloutFailure {
                    error: Error::at_step(k, e),
                    partial: rollout,
                })
            }
        };
        let norm = next.norm();
        rollout.plans.push(PlanRecord {
            step: k,
            objective: p.objective,
            sigma_final: p.sigma_final,
            iterations: p.iterations,
            degraded: p.degraded,
            fallback: p.fallback,
            projected,
            wall_seconds,
        });
        if !(norm <= EXPLOSION_BOUND) {
            return Err(RolloutFailure {
                error: Error::at_step(k, Error::StateExplosion { step: k, norm }),
                partial: rollout,
            });
        }
        warm_lambda = Some(big_lambda.clone());
        rollout.trajectory.push(u, big_lambda, next);
        previous = Some(p);
    }
    Ok(rollout)
}

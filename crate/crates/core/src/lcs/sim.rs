use nalgebra::DVector;

use super::modes::{count_distinct, ModeSignature, DEFAULT_MODE_THRESHOLD};
use super::params::LcsParams;
use crate::error::{Error, Result};
use crate::solvers::lcp::{solve_lcp_from, LcpProblem, DEFAULT_LCP_TOL};

/// Rollouts abort once `‖x_t‖` exceeds this bound.
pub const EXPLOSION_BOUND: f64 = 1e6;

fn check_dims(theta: &LcsParams, x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
    let dims = theta.dims();
    if x.len() != dims.n {
        return Err(Error::Dimension {
            what: "state",
            expected: dims.n,
            got: x.len(),
        });
    }
    if u.len() != dims.m {
        return Err(Error::Dimension {
            what: "input",
            expected: dims.m,
            got: u.len(),
        });
    }
    Ok(())
}

/// The complementarity problem solved at `(x, u)`: `M = F`, `q = D x + E u + c`.
pub fn step_lcp(theta: &LcsParams, x: &DVector<f64>, u: &DVector<f64>) -> Result<LcpProblem> {
    check_dims(theta, x, u)?;
    LcpProblem::new_trusted(theta.f().clone(), theta.lcp_offset(x, u))
}

/// One step of the LCS: returns `(x_next, λ)`.
pub fn lcs_step(theta: &LcsParams, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    lcs_step_warm(theta, x, u, None)
}

pub fn lcs_step_warm(
    theta: &LcsParams,
    x: &DVector<f64>,
    u: &DVector<f64>,
    warm: Option<&DVector<f64>>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let problem = step_lcp(theta, x, u)?;
    let lambda = solve_lcp_from(&problem, DEFAULT_LCP_TOL, warm)?;
    let next = theta.affine_next(x, u) + theta.c() * &lambda;
    Ok((next, lambda))
}

/// State, input and multiplier sequences of one open- or closed-loop run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub lambdas: Vec<DVector<f64>>,
    pub signatures: Vec<ModeSignature>,
}

impl Trajectory {
    pub fn new(x0: DVector<f64>) -> Self {
        Self {
            states: vec![x0],
            inputs: Vec::new(),
            lambdas: Vec::new(),
            signatures: Vec::new(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.inputs.len()
    }

    pub fn push(&mut self, u: DVector<f64>, lambda: DVector<f64>, next: DVector<f64>) {
        self.signatures.push(ModeSignature::from_lambda(&lambda, DEFAULT_MODE_THRESHOLD));
        self.inputs.push(u);
        self.lambdas.push(lambda);
        self.states.push(next);
    }

    pub fn is_consistent(&self) -> bool {
        self.states.len() == self.inputs.len() + 1
            && self.lambdas.len() == self.inputs.len()
            && self.signatures.len() == self.inputs.len()
    }

    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory always holds x0")
    }

    pub fn signatures_at(&self, threshold: f64) -> impl Iterator<Item = ModeSignature> + '_ {
        self.lambdas.iter().map(move |l| ModeSignature::from_lambda(l, threshold))
    }
}

/// Simulate `θ` from `x0` under `u_seq`.
pub fn lcs_rollout(theta: &LcsParams, x0: &DVector<f64>, u_seq: &[DVector<f64>]) -> Result<Trajectory> {
    lcs_rollout_within(theta, x0, u_seq, EXPLOSION_BOUND)
}

/// As [`lcs_rollout`], failing once a state norm exceeds `bound`.
pub fn lcs_rollout_within(theta: &LcsParams, x0: &DVector<f64>, u_seq: &[DVector<f64>], bound: f64) -> Result<Trajectory> {
    if u_seq.is_empty() {
        return Err(Error::InvalidProblem("rollout needs at least one input".into()));
    }
    let mut traj = Trajectory::new(x0.clone());
    let mut warm: Option<DVector<f64>> = None;
    for (t, u) in u_seq.iter().enumerate() {
        let x = traj.final_state();
        let (next, lambda) = lcs_step_warm(theta, x, u, warm.as_ref()).map_err(|e| Error::at_step(t, e))?;
        let norm = next.norm();
        if !(norm <= bound) {
            return Err(Error::at_step(t, Error::StateExplosion { step: t, norm }));
        }
        warm = Some(lambda.clone());
        traj.push(u.clone(), lambda, next);
    }
    Ok(traj)
}

/// Distinct mode signatures observed across a set of trajectories.
pub fn count_distinct_modes<'a, I>(trajectories: I, threshold: f64) -> usize
where
    I: IntoIterator<Item = &'a Trajectory>,
{
    count_distinct(trajectories.into_iter().flat_map(|t| t.signatures_at(threshold)))
}

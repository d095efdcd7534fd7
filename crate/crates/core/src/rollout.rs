//! Closed-loop episodes on the full-order system.

use std::fmt::Write as _;

use nalgebra::DVector;
use rand::Rng;

use crate::env::{random_policy, EnvConfig, Environment};
use crate::error::Result;
use crate::learner::DataPoint;
use crate::lcs::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    Random,
    Mpc,
}

/// Diagnostics of one receding-horizon planning call.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanRecord {
    pub step: usize,
    pub objective: f64,
    pub sigma_final: f64,
    pub iterations: usize,
    pub degraded: bool,
    /// The solver's plan was worse than its initial guess, which was used instead.
    pub fallback: bool,
    /// Applied input differed from the planned one by more than 1e-12 after projection.
    pub projected: bool,
    pub wall_seconds: f64,
}

/// One episode: the true-system trajectory (with the full-order multipliers) and its planning log.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub policy: Policy,
    pub trajectory: Trajectory,
    pub plans: Vec<PlanRecord>,
}

impl Rollout {
    pub fn x0(&self) -> &DVector<f64> {
        &self.trajectory.states[0]
    }

    pub fn horizon(&self) -> usize {
        self.trajectory.horizon()
    }

    pub fn inputs(&self) -> &[DVector<f64>] {
        &self.trajectory.inputs
    }

    pub fn datapoints(&self) -> impl Iterator<Item = DataPoint> + '_ {
        let t = &self.trajectory;
        (0..t.horizon()).map(move |k| DataPoint::new(t.states[k].clone(), t.inputs[k].clone(), t.states[k + 1].clone()))
    }

    pub fn degraded_plans(&self) -> usize {
        self.plans.iter().filter(|p| p.degraded).count()
    }

    /// `step,objective,sigma_final,iterations,degraded,fallback` CSV.
    pub fn plan_log_csv(&self) -> String {
        let mut out =
            String::from("# schema_version=1 kind=plan_log\nstep,objective,sigma_final,iterations,degraded,fallback\n");
        for p in &self.plans {
            writeln!(
                out,
                "{},{:e},{:e},{},{},{}",
                p.step, p.objective, p.sigma_final, p.iterations, p.degraded as u8, p.fallback as u8
            )
            .unwrap();
        }
        out
    }

    /// Planning wall-time percentiles (p50, p90, p99) in seconds.
    pub fn wall_time_percentiles(&self) -> Option<[f64; 3]> {
        if self.plans.is_empty() {
            return None;
        }
        let mut t: Vec<f64> = self.plans.iter().map(|p| p.wall_seconds).collect();
        t.sort_by(f64::total_cmp);
        let pick = |q: f64| t[((t.len() - 1) as f64 * q).round() as usize];
        Some([pick(0.5), pick(0.9), pick(0.99)])
    }
}

/// Episode of `horizon` steps under uniformly random inputs.
pub fn random_rollout<R: Rng + ?Sized>(
    env: &mut Environment,
    cfg: &EnvConfig,
    x0: &DVector<f64>,
    horizon: usize,
    rng: &mut R,
) -> Result<Rollout> {
    let us: Vec<_> = (0..horizon).map(|_| random_policy(cfg, rng)).collect();
    let trajectory = env.rollout(x0, &us)?;
    Ok(Rollout {
        policy: Policy::Random,
        trajectory,
        plans: Vec::new(),
    })
}

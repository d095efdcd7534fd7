//! The outer learning loop: train the reduced model on the rollout buffer,
//! set the trust region from the same buffer, collect on-policy episodes with
//! the new model, and cycle them into the buffer.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{sample_x0, EnvConfig, Environment};
use crate::error::{Error, Result};
use crate::lcs::{count_distinct, io::write_params, LcsDims, LcsParams, DEFAULT_MODE_THRESHOLD};
use crate::learner::{init_params, train, DataPoint, ViolationHyper};
use crate::metrics::{model_modes, relative_model_error, rollout_cost, rollout_cost_stage_only};
use crate::mpc::{receding_rollout, trust_region_from_inputs, MpcSettings, QuadCost, TrustRegion};
use crate::rollout::{random_rollout, Rollout};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopConfig {
    /// complementarity dimension of the reduced model
    pub r_reduced: usize,
    /// episode length H
    pub rollout_horizon: usize,
    pub new_rollouts: usize,
    pub buffer_capacity: usize,
    /// random-policy episodes in the initial buffer
    pub initial_rollouts: usize,
    /// trust-region width in buffer standard deviations
    pub eta: f64,
    pub iterations: usize,
    pub seed: u64,
    /// run every episode on the calling thread
    pub deterministic: bool,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            r_reduced: 3,
            rollout_horizon: 20,
            new_rollouts: 5,
            buffer_capacity: 50,
            initial_rollouts: 5,
            eta: 20.0,
            iterations: 25,
            seed: 0,
            deterministic: false,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("loop.r_reduced", self.r_reduced),
            ("loop.rollout_horizon", self.rollout_horizon),
            ("loop.new_rollouts", self.new_rollouts),
            ("loop.buffer_capacity", self.buffer_capacity),
            ("loop.initial_rollouts", self.initial_rollouts),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.r_reduced > 64 {
            return Err(Error::config("loop.r_reduced", "at most 64 complementarity variables are supported"));
        }
        if self.new_rollouts > self.buffer_capacity {
            return Err(Error::config("loop.new_rollouts", "must not exceed loop.buffer_capacity"));
        }
        if self.initial_rollouts > self.buffer_capacity {
            return Err(Error::config("loop.initial_rollouts", "must not exceed loop.buffer_capacity"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::config("loop.eta", "must be positive and finite"));
        }
        Ok(())
    }
}

/// Independent generator for one purpose (`tag`) and index within a run.
pub fn derived_rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

const TAG_INIT: u64 = 1;
const TAG_BUFFER: u64 = 2;
const TAG_TRAIN: u64 = 3;
const TAG_ROLLOUT: u64 = 4;
/// Tag for evaluation draws; exported so trials share held-out states across checkpoints.
pub const TAG_EVAL: u64 = 5;

/// FIFO of whole episodes.
#[derive(Debug, Clone)]
pub struct RolloutBuffer {
    capacity: usize,
    rollouts: VecDeque<Rollout>,
    /// insertion index of the front element
    first_id: usize,
}

impl RolloutBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "buffer capacity must be positive");
        Self {
            capacity,
            rollouts: VecDeque::with_capacity(capacity),
            first_id: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.rollouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rollouts.is_empty()
    }

    /// Append at the back and evict from the front down to capacity.
    pub fn push(&mut self, rollout: Rollout) {
        self.rollouts.push_back(rollout);
        while self.rollouts.len() > self.capacity {
            self.rollouts.pop_front();
            self.first_id += 1;
        }
    }

    pub fn extend(&mut self, rollouts: impl IntoIterator<Item = Rollout>) {
        for r in rollouts {
            self.push(r);
        }
    }

    /// Insertion indices of the stored episodes, oldest first.
    pub fn ids(&self) -> std::ops::Range<usize> {
        self.first_id..self.first_id + self.rollouts.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Rollout> {
        self.rollouts.iter()
    }

    pub fn datapoints(&self) -> Vec<DataPoint> {
        self.rollouts.iter().flat_map(|r| r.datapoints()).collect()
    }

    pub fn inputs(&self) -> impl Iterator<Item = &DVector<f64>> {
        self.rollouts.iter().flat_map(|r| r.inputs().iter())
    }

    pub fn trust_region(&self, eta: f64) -> Result<TrustRegion> {
        trust_region_from_inputs(self.inputs(), eta)
    }
}

/// One completed iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// model error of the freshly trained model on this iteration's new episodes
    pub on_policy_me: f64,
    pub mean_cost: f64,
    pub mean_cost_stage_only: f64,
    pub tr_lower: Vec<f64>,
    pub tr_upper: Vec<f64>,
    /// buffer size after appending and evicting
    pub buffer_size: usize,
    pub modes_f: usize,
    pub modes_g: usize,
    pub failures: usize,
    pub degraded_plans: usize,
    pub train_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LearningCurves {
    pub records: Vec<IterationRecord>,
}

impl LearningCurves {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let m = self.records.first().map_or(0, |r| r.tr_lower.len());
        let mut out = String::from("# schema_version=1 kind=curves\niteration,on_policy_me_pct,mean_cost,mean_cost_stage_only,");
        for j in 0..m {
            write!(out, "tr_lower_{j},tr_upper_{j},").unwrap();
        }
        out.push_str("buffer_size,modes_f,modes_g,failures,degraded_plans,train_loss\n");
        for r in &self.records {
            write!(out, "{},{:e},{:e},{:e},", r.iteration, r.on_policy_me, r.mean_cost, r.mean_cost_stage_only).unwrap();
            for j in 0..m {
                write!(out, "{:e},{:e},", r.tr_lower[j], r.tr_upper[j]).unwrap();
            }
            writeln!(
                out,
                "{},{},{},{},{},{:e}",
                r.buffer_size, r.modes_f, r.modes_g, r.failures, r.degraded_plans, r.train_loss
            )
            .unwrap();
        }
        out
    }
}

/// Everything that changes across iterations.
#[derive(Debug, Clone)]
pub struct LoopState {
    pub theta: LcsParams,
    pub buffer: RolloutBuffer,
    pub curves: LearningCurves,
    /// model and trust region used for the episodes of each completed iteration
    pub checkpoints: Vec<(LcsParams, TrustRegion)>,
}

/// The problem a loop runs on.
pub struct LoopContext<'a> {
    pub env: &'a Environment,
    pub env_cfg: &'a EnvConfig,
    pub cfg: &'a LoopConfig,
    pub learner: &'a ViolationHyper,
    pub mpc: &'a MpcSettings,
}

impl LoopContext<'_> {
    pub fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        self.learner.validate()?;
        self.mpc.validate()?;
        let d = self.env.dims();
        if d.n != self.env_cfg.n || d.m != self.env_cfg.m {
            return Err(Error::config("env", "environment dimensions differ from the env block"));
        }
        Ok(())
    }

    fn reduced_dims(&self) -> LcsDims {
        let d = self.env.dims();
        LcsDims::new(d.n, d.m, self.cfg.r_reduced)
    }

    fn cost(&self) -> QuadCost {
        let d = self.env.dims();
        QuadCost::identity(d.n, d.m)
    }
}

/// Random-policy episodes for the initial buffer.
pub fn init_buffer(ctx: &LoopContext) -> Result<RolloutBuffer> {
    let mut buffer = RolloutBuffer::new(ctx.cfg.buffer_capacity);
    let mut rng = derived_rng(ctx.cfg.seed, TAG_BUFFER, 0);
    let mut env = ctx.env.fresh();
    for _ in 0..ctx.cfg.initial_rollouts {
        let x0 = sample_x0(ctx.env_cfg, &mut rng);
        buffer.push(random_rollout(&mut env, ctx.env_cfg, &x0, ctx.cfg.rollout_horizon, &mut rng)?);
    }
    Ok(buffer)
}

/// Initial model and random buffer.
pub fn init_state(ctx: &LoopContext) -> Result<LoopState> {
    ctx.validate()?;
    let mut rng = derived_rng(ctx.cfg.seed, TAG_INIT, 0);
    Ok(LoopState {
        theta: init_params(ctx.reduced_dims(), &mut rng)?,
        buffer: init_buffer(ctx)?,
        curves: LearningCurves::default(),
        checkpoints: Vec::new(),
    })
}

/// One on-policy episode; a failed episode is retried once from a fresh `x0`.
fn collect_episode(ctx: &LoopContext, theta: &LcsParams, tr: &TrustRegion, iteration: usize, index: usize) -> (Option<Rollout>, usize) {
    let mut rng = derived_rng(ctx.cfg.seed, TAG_ROLLOUT, (iteration * ctx.cfg.new_rollouts + index) as u64);
    let cost = ctx.cost();
    let mut failures = 0;
    for attempt in 0..2 {
        let x0 = sample_x0(ctx.env_cfg, &mut rng);
        let mut env = ctx.env.fresh();
        match receding_rollout(&mut env, theta, &cost, tr, ctx.mpc, ctx.cfg.rollout_horizon, &x0) {
            Ok(r) => return (Some(r), failures),
            Err(f) => {
                failures += 1;
                log::warn!("iteration {iteration}, episode {index}, attempt {attempt}: {}", f.error);
            }
        }
    }
    (None, failures)
}

/// One pass of the loop. On error the state is left untouched.
pub fn run_iteration(state: &mut LoopState, ctx: &LoopContext) -> Result<()> {
    if state.buffer.is_empty() {
        return Err(Error::InvalidProblem("rollout buffer is empty".into()));
    }
    let iteration = state.curves.len();
    let data = state.buffer.datapoints();
    let mut rng = derived_rng(ctx.cfg.seed, TAG_TRAIN, iteration as u64);
    let (theta, report) = train(&state.theta, &data, ctx.learner, &mut rng)?;
    let tr = state.buffer.trust_region(ctx.cfg.eta)?;

    let collect = |i: usize| collect_episode(ctx, &theta, &tr, iteration, i);
    let results: Vec<(Option<Rollout>, usize)> = if ctx.cfg.deterministic {
        (0..ctx.cfg.new_rollouts).map(collect).collect()
    } else {
        (0..ctx.cfg.new_rollouts).into_par_iter().map(collect).collect()
    };
    let failed = results.iter().filter(|(r, _)| r.is_none()).count();
    if 2 * failed > ctx.cfg.new_rollouts {
        let err = Error::IterationFailed {
            iteration,
            failed,
            attempted: ctx.cfg.new_rollouts,
        };
        log::error!("{err}");
        return Err(err);
    }
    let failures: usize = results.iter().map(|(_, f)| f).sum();
    let fresh: Vec<Rollout> = results.into_iter().filter_map(|(r, _)| r).collect();

    let cost = ctx.cost();
    let on_policy: Vec<DataPoint> = fresh.iter().flat_map(|r| r.datapoints()).collect();
    let costs: Vec<f64> = fresh.iter().map(|r| rollout_cost(r, &cost)).collect();
    let costs2: Vec<f64> = fresh.iter().map(|r| rollout_cost_stage_only(r, &cost)).collect();
    let record = IterationRecord {
        iteration,
        on_policy_me: relative_model_error(&theta, &on_policy)?,
        mean_cost: costs.iter().sum::<f64>() / costs.len() as f64,
        mean_cost_stage_only: costs2.iter().sum::<f64>() / costs2.len() as f64,
        tr_lower: tr.lower().iter().copied().collect(),
        tr_upper: tr.upper().iter().copied().collect(),
        buffer_size: (state.buffer.len() + fresh.len()).min(state.buffer.capacity()),
        modes_f: count_distinct(fresh.iter().flat_map(|r| r.trajectory.signatures_at(DEFAULT_MODE_THRESHOLD))),
        modes_g: model_modes(&theta, &on_policy)?,
        failures,
        degraded_plans: fresh.iter().map(Rollout::degraded_plans).sum(),
        train_loss: report.final_loss,
    };
    log::info!(
        "iteration {iteration}: on-policy ME {:.3}%, mean cost {:.3}, modes f/g {}/{}",
        record.on_policy_me,
        record.mean_cost,
        record.modes_f,
        record.modes_g
    );

    state.buffer.extend(fresh);
    state.theta = theta.clone();
    state.checkpoints.push((theta, tr));
    state.curves.records.push(record);
    Ok(())
}

/// Per-iteration wall times; kept out of the deterministic artifacts.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LoopTiming {
    pub iteration_seconds: Vec<f64>,
    pub plans: usize,
    pub plan_seconds: f64,
}

impl LoopTiming {
    pub fn plans_per_second(&self) -> f64 {
        if self.plan_seconds > 0.0 {
            self.plans as f64 / self.plan_seconds
        } else {
            f64::NAN
        }
    }
}

/// Run `cfg.iterations` iterations from the initial state; writes artifacts when `out` is given.
pub fn run(ctx: &LoopContext, out: Option<&Path>) -> Result<(LoopState, LoopTiming)> {
    let mut state = init_state(ctx)?;
    let mut timing = LoopTiming::default();
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
    }
    for i in 0..ctx.cfg.iterations {
        let started = Instant::now();
        let before = state.buffer.ids().end;
        run_iteration(&mut state, ctx).map_err(|e| match e {
            e @ Error::IterationFailed { .. } => e,
            e => Error::AtStep {
                index: i,
                source: Box::new(e),
            },
        })?;
        timing.iteration_seconds.push(started.elapsed().as_secs_f64());
        let added = state.buffer.ids().end - before;
        for r in state.buffer.iter().skip(state.buffer.len() - added) {
            timing.plans += r.plans.len();
            timing.plan_seconds += r.plans.iter().map(|p| p.wall_seconds).sum::<f64>();
        }
        if let Some(dir) = out {
            write_params(&state.theta, &dir.join(format!("theta_iter_{i}.json")))?;
            fs::write(dir.join("curves.csv"), state.curves.to_csv())?;
        }
    }
    if let Some(dir) = out {
        fs::write(dir.join("curves.csv"), state.curves.to_csv())?;
        fs::write(
            dir.join("timing.json"),
            serde_json::to_string_pretty(&timing).expect("timing serializes"),
        )?;
    }
    Ok((state, timing))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lcs::Trajectory;
    use crate::rollout::Policy;

    fn tagged(v: f64) -> Rollout {
        let mut t = Trajectory::new(DVector::from_element(1, v));
        t.push(DVector::from_element(1, v), DVector::zeros(1), DVector::from_element(1, v));
        Rollout {
            policy: Policy::Random,
            trajectory: t,
            plans: Vec::new(),
        }
    }

    #[test]
    fn buffer_is_fifo() {
        let mut b = RolloutBuffer::new(3);
        for i in 0..5 {
            b.push(tagged(i as f64));
            assert!(b.len() <= 3);
        }
        let kept: Vec<f64> = b.iter().map(|r| r.x0()[0]).collect();
        assert_eq!(kept, vec![2.0, 3.0, 4.0]);
        assert_eq!(b.ids(), 2..5);
    }

    #[test]
    fn config_rejects_oversized_batches() {
        let cfg = LoopConfig {
            new_rollouts: 60,
            ..LoopConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(LoopConfig::default().validate().is_ok());
    }

    #[test]
    fn derived_streams_differ() {
        use rand::Rng;
        let a: u64 = derived_rng(3, TAG_TRAIN, 0).random();
        let b: u64 = derived_rng(3, TAG_TRAIN, 1).random();
        let c: u64 = derived_rng(3, TAG_ROLLOUT, 0).random();
        assert!(a != b && a != c);
        assert_eq!(a, derived_rng(3, TAG_TRAIN, 0).random::<u64>());
    }
}

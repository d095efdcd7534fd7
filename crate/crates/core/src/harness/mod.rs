//! Experiment commands behind the command-line front end.

pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::DVector;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{preset, AblationAxis, Config, ExperimentConfig, Preset, SolverConfig, ENV_PREFIX, PRESETS};

use crate::env::{generate_full_lcs, Environment};
use crate::error::{Error, Result};
use crate::lcs::io::{check_header, read_params, write_params, SCHEMA_VERSION};
use crate::lcs::LcsParams;
use crate::linalg::spectral_radius;
use crate::metrics::{evaluate_against, f_mpc_baseline, mean_std, table_csv, EvalReport, EvalSet, Stat, TrialEval};
use crate::mpc::{MpcSettings, QuadCost, TrustRegion};
use crate::reduction::{self, derived_rng, IterationRecord, LearningCurves, LoopContext, LoopTiming, TAG_EVAL};

pub const TRUST_REGION_KIND: &str = "trust_region";

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("artifact serializes") + "\n"
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrustRegionDocument {
    pub schema_version: u32,
    pub kind: String,
    pub center: Vec<f64>,
    pub half_width: Vec<f64>,
}

pub fn write_trust_region(tr: &TrustRegion, path: &Path) -> Result<()> {
    let doc = TrustRegionDocument {
        schema_version: SCHEMA_VERSION,
        kind: TRUST_REGION_KIND.into(),
        center: tr.center.iter().copied().collect(),
        half_width: tr.half_width.iter().copied().collect(),
    };
    fs::write(path, to_json(&doc))?;
    Ok(())
}

pub fn read_trust_region(path: &Path) -> Result<TrustRegion> {
    let label = path.display().to_string();
    let doc: TrustRegionDocument = serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Parse {
        path: label.clone(),
        message: e.to_string(),
    })?;
    check_header(&label, doc.schema_version, &doc.kind, TRUST_REGION_KIND)?;
    TrustRegion::new(DVector::from_vec(doc.center), DVector::from_vec(doc.half_width))
}

pub fn load_env(path: &Path) -> Result<Environment> {
    Ok(Environment::new(read_params(path)?))
}

/// Seed of the held-out evaluation batch for a run seeded with `seed`.
pub fn eval_seed(seed: u64) -> u64 {
    derived_rng(seed, TAG_EVAL, 0).next_u64()
}

fn check_env_matches(cfg: &Config, env: &Environment) -> Result<()> {
    let d = env.dims();
    for (field, want, got) in [("env.n", cfg.env.n, d.n), ("env.m", cfg.env.m, d.m), ("env.r_full", cfg.env.r_full, d.r)] {
        if want != got {
            return Err(Error::config(
                field,
                format!("config says {want} but the environment file has {got}"),
            ));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSummary {
    pub schema_version: u32,
    pub kind: String,
    pub n: usize,
    pub m: usize,
    pub r_full: usize,
    pub seed: u64,
    /// index of the accepted draw
    pub attempt: usize,
    pub spectral_radius: f64,
    /// spectral radius of A before it was rescaled
    pub rescaled_from: Option<f64>,
    pub screen_modes: usize,
}

pub fn generate_env(cfg: &Config, out: &Path) -> Result<(Environment, EnvSummary)> {
    let env = generate_full_lcs(&cfg.env)?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_params(env.theta(), out)?;
    let d = env.dims();
    let summary = EnvSummary {
        schema_version: SCHEMA_VERSION,
        kind: "env_summary".into(),
        n: d.n,
        m: d.m,
        r_full: d.r,
        seed: cfg.env.seed,
        attempt: env.attempt,
        spectral_radius: spectral_radius(env.theta().a()),
        rescaled_from: env.rescaled.map(|(before, _)| before),
        screen_modes: env.screen_modes,
    };
    Ok((env, summary))
}

/// Result of one reduction run plus its held-out evaluation.
#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub seed: u64,
    pub eval: TrialEval,
    /// evaluation of the first iteration's model, when requested
    pub initial: Option<TrialEval>,
    pub curves: LearningCurves,
    pub timing: LoopTiming,
    pub theta: LcsParams,
    pub trust_region: TrustRegion,
}

/// Held-out evaluation batch and f-MPC baseline for one environment.
pub struct Evaluator<'a> {
    env: &'a Environment,
    mpc: &'a MpcSettings,
    cfg: &'a Config,
    set: EvalSet,
    baseline: crate::metrics::ClosedLoopBatch,
}

impl<'a> Evaluator<'a> {
    pub fn new(cfg: &'a Config, env: &'a Environment) -> Result<Self> {
        let eval = &cfg.experiment.eval;
        let steps = cfg.reduction.rollout_horizon;
        let set = EvalSet::draw(env, &cfg.env, eval, steps, eval_seed(cfg.reduction.seed))?;
        let cost = QuadCost::identity(env.dims().n, env.dims().m);
        let baseline = f_mpc_baseline(env, &cost, &set.x0s, &cfg.mpc, steps, eval.baseline_input_bound)?;
        Ok(Self {
            env,
            mpc: &cfg.mpc,
            cfg,
            set,
            baseline,
        })
    }

    pub fn evaluate(&self, theta: &LcsParams, tr: &TrustRegion) -> Result<TrialEval> {
        let (d, e) = (theta.dims(), self.env.dims());
        if d.n != e.n {
            return Err(Error::Dimension {
                what: "model state size",
                expected: e.n,
                got: d.n,
            });
        }
        if d.m != e.m {
            return Err(Error::Dimension {
                what: "model input size",
                expected: e.m,
                got: d.m,
            });
        }
        evaluate_against(
            self.env,
            theta,
            tr,
            &self.set,
            &self.baseline,
            self.mpc,
            self.cfg.reduction.rollout_horizon,
            &self.cfg.experiment.eval,
        )
    }

    pub fn baseline_cost(&self) -> f64 {
        self.baseline.mean_cost()
    }
}

/// Run the reduction loop on `env` and evaluate the last model with the trust region it was deployed with.
pub fn run_on_env(cfg: &Config, env: &Environment, out: Option<&Path>) -> Result<TrialOutcome> {
    let hyper = cfg.learner_hyper();
    let ctx = LoopContext {
        env,
        env_cfg: &cfg.env,
        cfg: &cfg.reduction,
        learner: &hyper,
        mpc: &cfg.mpc,
    };
    let (state, timing) = reduction::run(&ctx, out)?;
    let (theta, tr) = match state.checkpoints.last() {
        Some((theta, tr)) => (theta.clone(), tr.clone()),
        None => (state.theta.clone(), state.buffer.trust_region(cfg.reduction.eta)?),
    };
    let evaluator = Evaluator::new(cfg, env)?;
    let eval = evaluator.evaluate(&theta, &tr)?;
    let initial = match state.checkpoints.first() {
        Some((t0, tr0)) if cfg.experiment.evaluate_first_iteration => Some(evaluator.evaluate(t0, tr0)?),
        _ => None,
    };
    if let Some(dir) = out {
        write_params(&theta, &dir.join("theta_final.json"))?;
        write_trust_region(&tr, &dir.join("trust_region.json"))?;
    }
    Ok(TrialOutcome {
        seed: cfg.reduction.seed,
        eval,
        initial,
        curves: state.curves,
        timing,
        theta,
        trust_region: tr,
    })
}

/// Fresh environment and full run for one seed.
pub fn run_trial(cfg: &Config, seed: u64, out: Option<&Path>) -> Result<TrialOutcome> {
    let cfg = cfg.with_seed(seed);
    let env = generate_full_lcs(&cfg.env)?;
    run_on_env(&cfg, &env, out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub schema_version: u32,
    pub kind: String,
    pub config: Config,
    pub iterations: usize,
    pub final_record: Option<IterationRecord>,
    pub evaluation: TrialEval,
    pub trust_region_lower: Vec<f64>,
    pub trust_region_upper: Vec<f64>,
}

/// Wall-clock side file; never part of the deterministic artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunTiming {
    #[serde(rename = "loop")]
    pub reduction: LoopTiming,
    pub plans_per_second: f64,
    pub total_seconds: f64,
}

pub fn train(cfg: &Config, env: &Environment, out: &Path) -> Result<(TrainSummary, RunTiming)> {
    check_env_matches(cfg, env)?;
    let started = Instant::now();
    fs::create_dir_all(out)?;
    let outcome = run_on_env(cfg, env, Some(out))?;
    let summary = TrainSummary {
        schema_version: SCHEMA_VERSION,
        kind: "train_summary".into(),
        config: cfg.clone(),
        iterations: outcome.curves.len(),
        final_record: outcome.curves.records.last().cloned(),
        evaluation: outcome.eval,
        trust_region_lower: outcome.trust_region.lower().iter().copied().collect(),
        trust_region_upper: outcome.trust_region.upper().iter().copied().collect(),
    };
    fs::write(out.join("summary.json"), to_json(&summary))?;
    let timing = RunTiming {
        plans_per_second: outcome.timing.plans_per_second(),
        reduction: outcome.timing,
        total_seconds: started.elapsed().as_secs_f64(),
    };
    fs::write(out.join("timing.json"), to_json(&timing))?;
    Ok((summary, timing))
}

/// Evaluate a stored model; without `tr` the reduced planner gets the baseline's input box.
pub fn evaluate(cfg: &Config, env: &Environment, theta: &LcsParams, tr: Option<&TrustRegion>, out: &Path) -> Result<EvalReport> {
    check_env_matches(cfg, env)?;
    let tr = match tr {
        Some(tr) => tr.clone(),
        None => TrustRegion::symmetric(env.dims().m, cfg.experiment.eval.baseline_input_bound),
    };
    let row = Evaluator::new(cfg, env)?.evaluate(theta, &tr)?;
    let d = theta.dims();
    let report = EvalReport::aggregate(cfg.case_name(), (cfg.env.n, cfg.env.m, cfg.env.r_full, d.r), vec![row], 0);
    fs::create_dir_all(out)?;
    fs::write(out.join("report.json"), report.to_json() + "\n")?;
    fs::write(out.join("report.csv"), table_csv(std::slice::from_ref(&report)))?;
    Ok(report)
}

/// Map `f` over `jobs`, on up to `parallel` threads unless `deterministic`.
fn fan_out<J, T, F>(jobs: &[J], parallel: usize, deterministic: bool, f: F) -> Vec<T>
where
    J: Sync,
    T: Send,
    F: Fn(&J) -> T + Sync + Send,
{
    if deterministic || parallel <= 1 {
        return jobs.iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(parallel).build() {
        Ok(pool) => pool.install(|| jobs.par_iter().map(&f).collect()),
        Err(e) => {
            log::warn!("thread pool unavailable ({e}), running sequentially");
            jobs.iter().map(f).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialFailure {
    pub group: String,
    pub seed: u64,
    pub error: String,
}

/// Per-iteration mean and standard deviation across trials, for plotting.
pub fn curves_csv(curves: &[&LearningCurves]) -> String {
    let mut out = String::from("# schema_version=1 kind=curve_stats\niteration,trials,on_policy_me_mean,on_policy_me_std,cost_mean,cost_std,modes_g_mean\n");
    let len = curves.iter().map(|c| c.len()).max().unwrap_or(0);
    for i in 0..len {
        let rows: Vec<_> = curves.iter().filter_map(|c| c.records.get(i)).collect();
        let (me, me_sd) = mean_std(&rows.iter().map(|r| r.on_policy_me).collect::<Vec<_>>());
        let (cost, cost_sd) = mean_std(&rows.iter().map(|r| r.mean_cost).collect::<Vec<_>>());
        let (modes, _) = mean_std(&rows.iter().map(|r| r.modes_g as f64).collect::<Vec<_>>());
        writeln!(out, "{i},{},{me},{me_sd},{cost},{cost_sd},{modes}", rows.len()).unwrap();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Summary {
    pub schema_version: u32,
    pub kind: String,
    pub reports: Vec<EvalReport>,
    pub failures: Vec<TrialFailure>,
    /// cases with too few successful trials to aggregate
    pub incomplete: Vec<String>,
}

impl Table2Summary {
    pub fn is_partial(&self) -> bool {
        !self.failures.is_empty() || !self.incomplete.is_empty()
    }
}

fn enough(cfg: &Config, ok: usize, total: usize) -> bool {
    total > 0 && ok as f64 >= cfg.experiment.min_success_fraction * total as f64 - 1e-9
}

/// Every (case, seed) trial with a fresh environment, aggregated per case.
pub fn table2(cfg: &Config, out: &Path) -> Result<Table2Summary> {
    fs::create_dir_all(out)?;
    let mut jobs = Vec::new();
    for case in &cfg.experiment.cases {
        let mut case_cfg = cfg.clone();
        preset(case)?.apply(&mut case_cfg);
        case_cfg.validate()?;
        if case == "case7" {
            log::warn!("case7 (n = 30) takes considerably longer per trial");
        }
        for &seed in &cfg.experiment.seeds {
            jobs.push((case.clone(), case_cfg.clone(), seed));
        }
    }
    let results = fan_out(&jobs, cfg.experiment.parallel, cfg.reduction.deterministic, |(case, case_cfg, seed)| {
        let dir = out.join(case).join(format!("seed_{seed}"));
        fs::create_dir_all(&dir)?;
        log::info!("{case} seed {seed}: starting");
        run_trial(case_cfg, *seed, Some(&dir))
    });
    let mut summary = Table2Summary {
        schema_version: SCHEMA_VERSION,
        kind: "table2".into(),
        reports: Vec::new(),
        failures: Vec::new(),
        incomplete: Vec::new(),
    };
    for case in &cfg.experiment.cases {
        let mut rows = Vec::new();
        let mut curves = Vec::new();
        let mut total = 0;
        for ((c, _, seed), res) in jobs.iter().zip(&results) {
            if c != case {
                continue;
            }
            total += 1;
            match res {
                Ok(t) => {
                    rows.push(t.eval.clone());
                    curves.push(&t.curves);
                }
                Err(e) => summary.failures.push(TrialFailure {
                    group: case.clone(),
                    seed: *seed,
                    error: e.to_string(),
                }),
            }
        }
        if !enough(cfg, rows.len(), total) {
            log::error!("{case}: only {} of {total} trials succeeded, not aggregated", rows.len());
            summary.incomplete.push(case.clone());
            continue;
        }
        fs::write(out.join(format!("curves_{case}.csv")), curves_csv(&curves))?;
        let p = preset(case)?;
        summary
            .reports
            .push(EvalReport::aggregate(case, (p.n, p.m, p.r_full, p.r_reduced), rows, total - curves.len()));
    }
    fs::write(out.join("table2.csv"), table_csv(&summary.reports))?;
    fs::write(out.join("summary.json"), to_json(&summary))?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: f64,
    pub trials: usize,
    pub failed: usize,
    pub on_policy_me: Stat,
    pub gap: Stat,
    pub rows: Vec<TrialEval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub schema_version: u32,
    pub kind: String,
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
    pub failures: Vec<TrialFailure>,
    pub incomplete: Vec<f64>,
}

impl AblationSummary {
    pub fn is_partial(&self) -> bool {
        !self.failures.is_empty() || !self.incomplete.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# schema_version={SCHEMA_VERSION} kind=ablation\naxis,value,trials,on_policy_me_mean,on_policy_me_std,gap_mean,gap_std\n"
        );
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                self.axis.name(),
                r.value,
                r.trials,
                r.on_policy_me.mean,
                r.on_policy_me.std,
                r.gap.mean,
                r.gap.std
            )
            .unwrap();
        }
        out
    }
}

/// One run per (grid value, seed) on the configured case dimensions.
pub fn ablation(cfg: &Config, out: &Path) -> Result<AblationSummary> {
    let axis = cfg
        .experiment
        .axis
        .ok_or_else(|| Error::config("experiment.axis", "ablation needs an axis"))?;
    if cfg.experiment.grid.is_empty() {
        return Err(Error::config("experiment.grid", "ablation needs at least one value"));
    }
    fs::create_dir_all(out)?;
    let mut jobs = Vec::new();
    for &value in &cfg.experiment.grid {
        let mut c = cfg.clone();
        axis.apply(&mut c, value)?;
        c.validate()?;
        for &seed in &cfg.experiment.seeds {
            jobs.push((value, c.clone(), seed));
        }
    }
    let results = fan_out(&jobs, cfg.experiment.parallel, cfg.reduction.deterministic, |(value, c, seed)| {
        let dir = out.join(format!("{}_{value}", axis.name())).join(format!("seed_{seed}"));
        fs::create_dir_all(&dir)?;
        run_trial(c, *seed, Some(&dir))
    });
    let mut summary = AblationSummary {
        schema_version: SCHEMA_VERSION,
        kind: "ablation".into(),
        axis,
        rows: Vec::new(),
        failures: Vec::new(),
        incomplete: Vec::new(),
    };
    let mut curve_text = String::new();
    for &value in &cfg.experiment.grid {
        let mut rows = Vec::new();
        let mut curves = Vec::new();
        let mut total = 0;
        for ((v, _, seed), res) in jobs.iter().zip(&results) {
            if *v != value {
                continue;
            }
            total += 1;
            match res {
                Ok(t) => {
                    rows.push(t.eval.clone());
                    curves.push(&t.curves);
                }
                Err(e) => summary.failures.push(TrialFailure {
                    group: format!("{}={value}", axis.name()),
                    seed: *seed,
                    error: e.to_string(),
                }),
            }
        }
        if !enough(cfg, rows.len(), total) {
            summary.incomplete.push(value);
            continue;
        }
        for line in curves_csv(&curves).lines().skip(2) {
            writeln!(curve_text, "{value},{line}").unwrap();
        }
        summary.rows.push(AblationRow {
            value,
            trials: rows.len(),
            failed: total - rows.len(),
            on_policy_me: Stat::of(&rows.iter().map(|r| r.on_policy_me).collect::<Vec<_>>()),
            gap: Stat::of(&rows.iter().map(|r| r.gap).collect::<Vec<_>>()),
            rows,
        });
    }
    fs::write(out.join("ablation.csv"), summary.to_csv())?;
    fs::write(
        out.join("ablation_curves.csv"),
        format!(
            "# schema_version={SCHEMA_VERSION} kind=ablation_curves\nvalue,iteration,trials,on_policy_me_mean,on_policy_me_std,cost_mean,cost_std,modes_g_mean\n{curve_text}"
        ),
    )?;
    fs::write(out.join("summary.json"), to_json(&summary))?;
    Ok(summary)
}

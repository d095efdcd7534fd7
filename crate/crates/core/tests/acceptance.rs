//! Acceptance checks, one test per criterion. Each prints a `criterion N: PASS|FAIL` line to stderr
//! (bypassing output capture). Oracle checks assert; the closed-loop reproduction checks
//! (4, 5 and the trend half of 7) only report, since their outcome is a measurement.

use std::io::Write as _;
use std::sync::OnceLock;
use std::time::Instant;

use hybrid_reduction::env::{generate_full_lcs, Environment};
use hybrid_reduction::harness::{run_trial, Config, TrialOutcome};
use hybrid_reduction::learner::{init_params, violation_grad, InnerQp, ViolationHyper};
use hybrid_reduction::lcs::{lcs_rollout, lcs_step_warm, LcsDims, LcsParams, LcsParts};
use hybrid_reduction::metrics::{f_mpc_baseline, lemma_diagnostics, EvalSet};
use hybrid_reduction::mpc::{plan, MpcPlan, MpcSettings, QuadCost, TrustRegion};
use hybrid_reduction::reduction::{init_state, run, run_iteration, LoopContext};
use hybrid_reduction::solvers::lcp::{solve_lcp, LcpProblem};
use hybrid_reduction::solvers::qp::{solve_qp_nonneg, QpNonneg};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(id: u32, pass: bool, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr().lock(), "criterion {id}: {verdict} {detail}");
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, s: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-s..s))
}

fn uniform_vec(rng: &mut ChaCha8Rng, len: usize, s: f64) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.random_range(-s..s))
}

fn subset(mask: usize, k: usize) -> Vec<usize> {
    (0..k).filter(|i| mask >> i & 1 == 1).collect()
}

/// Solve the principal system `M_SS z_S = −q_S`, zero elsewhere.
fn principal_solution(m: &DMatrix<f64>, q: &DVector<f64>, s: &[usize]) -> Option<DVector<f64>> {
    let mut z = DVector::zeros(q.len());
    if s.is_empty() {
        return Some(z);
    }
    let mss = DMatrix::from_fn(s.len(), s.len(), |i, j| m[(s[i], s[j])]);
    let qs = DVector::from_fn(s.len(), |i, _| -q[s[i]]);
    let zs = mss.lu().solve(&qs)?;
    for (i, &k) in s.iter().enumerate() {
        z[k] = zs[i];
    }
    Some(z)
}

/// Enumerate active sets of the LCP `0 ≤ λ ⊥ Mλ + q ≥ 0`.
fn lcp_by_enumeration(m: &DMatrix<f64>, q: &DVector<f64>) -> DVector<f64> {
    let k = q.len();
    for mask in 0..1usize << k {
        let s = subset(mask, k);
        let Some(z) = principal_solution(m, q, &s) else { continue };
        let w = m * &z + q;
        if z.iter().all(|v| *v >= -1e-12) && w.iter().all(|v| *v >= -1e-12) {
            return z;
        }
    }
    panic!("monotone LCP without a solution");
}

/// Minimum of `½zᵀPz + bᵀz` over `z ≥ 0` by enumerating the free set.
fn qp_by_enumeration(p: &DMatrix<f64>, b: &DVector<f64>) -> f64 {
    let k = b.len();
    let mut best = f64::INFINITY;
    for mask in 0..1usize << k {
        let s = subset(mask, k);
        let Some(z) = principal_solution(p, b, &s) else { continue };
        if z.iter().all(|v| *v >= 0.0) {
            best = best.min(0.5 * z.dot(&(p * &z)) + b.dot(&z));
        }
    }
    best
}

#[test]
fn criterion_1_solver_oracles() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut lcp_dev, mut lcp_res) = (0.0_f64, 0.0_f64);
    for _ in 0..1000 {
        let r = rng.random_range(1..=4);
        let g = uniform(&mut rng, r, r, 1.0);
        let h = uniform(&mut rng, r, r, 1.0);
        let m = &g * g.transpose() + &h - h.transpose() + DMatrix::identity(r, r) * 0.1;
        let q = uniform_vec(&mut rng, r, 2.0);
        let oracle = lcp_by_enumeration(&m, &q);
        let p = LcpProblem::new(m, q).unwrap();
        let lambda = solve_lcp(&p, 1e-10).unwrap();
        lcp_dev = lcp_dev.max((&lambda - &oracle).amax());
        lcp_res = lcp_res.max(p.residual(&lambda).max_violation());
    }
    let mut qp_gap = 0.0_f64;
    for _ in 0..200 {
        let k = rng.random_range(1..=6);
        let a = uniform(&mut rng, k, k, 1.0);
        let p = a.transpose() * &a + DMatrix::identity(k, k) * 0.1;
        let b = uniform_vec(&mut rng, k, 1.0);
        let oracle = qp_by_enumeration(&p, &b);
        let qp = QpNonneg::new(p, b).unwrap();
        let z = solve_qp_nonneg(&qp, 1e-10).unwrap();
        assert!(z.iter().all(|v| *v >= 0.0));
        qp_gap = qp_gap.max((qp.objective(&z) - oracle).abs());
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = lcp_dev < 1e-6 && lcp_res < 1e-8 && qp_gap < 1e-7 && secs < 60.0;
    report(
        1,
        pass,
        format!("LCP max |λ − λ_enum| {lcp_dev:.2e}, max residual {lcp_res:.2e} (< 1e-8); QP max objective gap {qp_gap:.2e} (< 1e-7); {secs:.1}s"),
    );
    assert!(pass);
}

#[test]
fn criterion_2_envelope_gradient() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let hyper = ViolationHyper::default();
    let h = 1e-5;
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let dims = LcsDims::new(rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4));
        let theta = init_params(dims, &mut rng).unwrap();
        let dp = hybrid_reduction::learner::DataPoint::new(
            uniform_vec(&mut rng, dims.n, 2.0),
            uniform_vec(&mut rng, dims.m, 2.0),
            uniform_vec(&mut rng, dims.n, 2.0),
        );
        let sol = InnerQp::new(&theta, hyper.epsilon, 1e-12).solve(&dp, None).unwrap();
        let analytic = violation_grad(&theta, &dp, &sol, &hyper).flatten(dims);
        let flat = theta.to_flat();
        let loss = |v: &[f64]| {
            let t = LcsParams::from_flat(dims, v).unwrap();
            InnerQp::new(&t, hyper.epsilon, 1e-12).solve(&dp, None).unwrap().loss
        };
        let fd: Vec<f64> = (0..flat.len())
            .map(|k| {
                let (mut up, mut down) = (flat.clone(), flat.clone());
                up[k] += h;
                down[k] -= h;
                (loss(&up) - loss(&down)) / (2.0 * h)
            })
            .collect();
        let scale = fd.iter().fold(0.0_f64, |a, v| a.max(v.abs())).max(1e-6);
        let err = analytic.iter().zip(&fd).fold(0.0_f64, |a, (x, y)| a.max((x - y).abs())) / scale;
        worst = worst.max(err);
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = worst < 1e-4 && secs < 120.0;
    report(2, pass, format!("max relative gradient error {worst:.2e} over 100 instances (< 1e-4); {secs:.1}s"));
    assert!(pass);
}

fn scalar_lcs() -> LcsParams {
    let mut parts = LcsParts::zeros(LcsDims::new(1, 1, 1));
    parts.a = DMatrix::from_element(1, 1, 1.2);
    parts.b = DMatrix::from_element(1, 1, 0.5);
    parts.c = DMatrix::from_element(1, 1, -1.5);
    parts.lcp_d = DMatrix::from_element(1, 1, 1.0);
    parts.lcp_e = DMatrix::from_element(1, 1, -0.7);
    parts.g = DMatrix::from_element(1, 1, 1.0);
    parts.lcp_c = DVector::from_element(1, 0.3);
    LcsParams::new(parts).unwrap()
}

/// Best cost over a 401³ grid of inputs in [−2, 2], simulating the scalar system in closed form.
fn scalar_grid_optimum(x0: f64) -> f64 {
    let step = |x: f64, u: f64| {
        let lambda = (-(x - 0.7 * u + 0.3)).max(0.0);
        1.2 * x + 0.5 * u - 1.5 * lambda
    };
    let grid: Vec<f64> = (0..=400).map(|i| -2.0 + 0.01 * i as f64).collect();
    let mut best = f64::INFINITY;
    for &u0 in &grid {
        let x1 = step(x0, u0);
        let c0 = x0 * x0 + u0 * u0;
        for &u1 in &grid {
            let x2 = step(x1, u1);
            let c1 = c0 + x1 * x1 + u1 * u1;
            if c1 >= best {
                continue;
            }
            for &u2 in &grid {
                let x3 = step(x2, u2);
                best = best.min(c1 + x2 * x2 + u2 * u2 + x3 * x3);
            }
        }
    }
    best
}

fn exact_cost(theta: &LcsParams, cost: &QuadCost, x0: &DVector<f64>, p: &MpcPlan) -> f64 {
    let traj = lcs_rollout(theta, x0, &p.inputs).unwrap();
    cost.horizon_cost(&traj.states, &p.inputs)
}

#[test]
fn criterion_3_mpc_oracles() {
    let started = Instant::now();
    let settings = MpcSettings {
        horizon: 3,
        ..MpcSettings::default()
    };
    let theta = scalar_lcs();
    let cost = QuadCost::identity(1, 1);
    let tr = TrustRegion::symmetric(1, 2.0);
    let mut worst_grid = f64::NEG_INFINITY;
    for x0 in [-2.0, -1.0, -0.3, 0.5, 1.5, 2.5] {
        let x = DVector::from_element(1, x0);
        let p = plan(&theta, &x, &cost, &tr, &settings, None).unwrap();
        let j = exact_cost(&theta, &cost, &x, &p);
        let grid = scalar_grid_optimum(x0);
        worst_grid = worst_grid.max((j - grid) / grid);
    }

    // C = 0: the multipliers never reach the state, so this is finite-horizon LQR.
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (n, m) = (3, 2);
    let mut parts = LcsParts::zeros(LcsDims::new(n, m, 2));
    parts.a = uniform(&mut rng, n, n, 0.6);
    parts.b = uniform(&mut rng, n, m, 1.0);
    parts.lcp_d = uniform(&mut rng, 2, n, 1.0);
    parts.lcp_e = uniform(&mut rng, 2, m, 1.0);
    parts.g = DMatrix::identity(2, 2);
    parts.lcp_c = uniform_vec(&mut rng, 2, 1.0);
    let linear = LcsParams::new(parts.clone()).unwrap();
    let settings = MpcSettings::default();
    let cost = QuadCost::identity(n, m);
    let (a, b) = (&parts.a, &parts.b);
    let mut p_mat = cost.q_t.clone();
    let mut gains = Vec::new();
    for _ in 0..settings.horizon {
        let k = (&cost.r + b.transpose() * &p_mat * b).lu().solve(&(b.transpose() * &p_mat * a)).unwrap();
        p_mat = &cost.q + a.transpose() * &p_mat * (a - b * &k);
        gains.push(k);
    }
    let mut worst_lqr = 0.0_f64;
    for _ in 0..5 {
        let x0 = uniform_vec(&mut rng, n, 2.0);
        let p = plan(&linear, &x0, &cost, &TrustRegion::symmetric(m, 1e3), &settings, None).unwrap();
        let j_star = x0.dot(&(&p_mat * &x0));
        let j = exact_cost(&linear, &cost, &x0, &p);
        let u_star = -(gains.last().unwrap() * &x0);
        worst_lqr = worst_lqr
            .max((j - j_star).abs() / j_star.max(1.0))
            .max((p.first_input() - u_star).amax());
    }

    let pinned = TrustRegion::new(DVector::from_vec(vec![0.25, -0.5]), DVector::zeros(2)).unwrap();
    let p = plan(&linear, &uniform_vec(&mut rng, n, 2.0), &cost, &pinned, &settings, None).unwrap();
    let pins_exact = p.inputs.iter().all(|u| *u == pinned.center);

    let secs = started.elapsed().as_secs_f64();
    let pass = worst_grid <= 0.01 && worst_lqr < 1e-4 && pins_exact && secs < 60.0;
    report(
        3,
        pass,
        format!(
            "scalar plan vs grid optimum worst {:+.4}% (≤ 1%); C = 0 vs Riccati worst {worst_lqr:.2e} (< 1e-4); Δ = 0 pins inputs: {pins_exact}; {secs:.1}s",
            100.0 * worst_grid
        ),
    );
    assert!(pass);
}

const CASE1_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Case-1 trials shared by criteria 4 and 7.
fn case1_trials() -> &'static Vec<(u64, Result<TrialOutcome, String>)> {
    static TRIALS: OnceLock<Vec<(u64, Result<TrialOutcome, String>)>> = OnceLock::new();
    TRIALS.get_or_init(|| {
        let mut cfg = Config::from_preset("case1").unwrap();
        cfg.experiment.evaluate_first_iteration = true;
        CASE1_SEEDS
            .iter()
            .map(|&s| (s, run_trial(&cfg, s, None).map_err(|e| e.to_string())))
            .collect()
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_4_case1_reduction() {
    let started = Instant::now();
    let trials = case1_trials();
    let ok: Vec<&TrialOutcome> = trials.iter().filter_map(|(_, r)| r.as_ref().ok()).collect();
    for (seed, r) in trials {
        if let Err(e) = r {
            let _ = writeln!(std::io::stderr(), "case1 seed {seed} failed: {e}");
        }
    }
    if ok.is_empty() {
        report(4, false, "no Case-1 trial completed".into());
        return;
    }
    let col = |f: &dyn Fn(&TrialOutcome) -> f64| ok.iter().map(|t| f(t)).collect::<Vec<_>>();
    let gaps = col(&|t| t.eval.gap);
    let me = col(&|t| t.eval.on_policy_me);
    let modes_g = mean(&col(&|t| t.eval.modes_g as f64));
    let modes_f = mean(&col(&|t| t.eval.random_modes_f as f64));
    let (gap, me_mean) = (mean(&gaps), mean(&me));
    let pass = ok.len() == CASE1_SEEDS.len() && gap <= 5.0 && me_mean <= 3.0 && modes_g <= 8.0 && modes_f >= 100.0;
    report(
        4,
        pass,
        format!(
            "{} trials: mean gap {gap:.2}% (≤ 5), mean on-policy ME {me_mean:.2}% (≤ 3), modes in g {modes_g:.1} (≤ 8), random-policy modes in f {modes_f:.1} (≥ 100); per-seed gap {:.1?}, ME {:.2?}; {:.0}s",
            ok.len(),
            gaps,
            me,
            started.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_5_mode_budget_trend() {
    let started = Instant::now();
    let mut groups = Vec::new();
    for case in ["case3", "case4", "case5", "case6"] {
        let mut cfg = Config::from_preset(case).unwrap();
        cfg.experiment.eval.random_rollouts = 50;
        cfg.experiment.eval.fd_step = 0.0;
        let mes: Vec<f64> = (0..3)
            .filter_map(|s| match run_trial(&cfg, s, None) {
                Ok(t) => Some(t.eval.on_policy_me),
                Err(e) => {
                    let _ = writeln!(std::io::stderr(), "{case} seed {s} failed: {e}");
                    None
                }
            })
            .collect();
        groups.push((cfg.reduction.r_reduced, mes));
    }
    let complete = groups.iter().all(|(_, v)| v.len() >= 3);
    let dof: f64 = groups.iter().map(|(_, v)| v.len() as f64 - 1.0).sum();
    let pooled_var: f64 = groups
        .iter()
        .map(|(_, v)| {
            let mu = mean(v);
            v.iter().map(|x| (x - mu).powi(2)).sum::<f64>()
        })
        .sum::<f64>()
        / dof.max(1.0);
    let pooled = pooled_var.sqrt();
    let means: Vec<(usize, f64)> = groups.iter().map(|(r, v)| (*r, mean(v))).collect();
    let monotone = means.windows(2).all(|w| w[1].1 <= w[0].1 + pooled);
    report(
        5,
        complete && monotone,
        format!(
            "on-policy ME by λ budget {:?} (pooled std {pooled:.2}); nonincreasing within one pooled std: {monotone}; {:.0}s",
            means.iter().map(|(r, m)| format!("{r}: {m:.2}%")).collect::<Vec<_>>(),
            started.elapsed().as_secs_f64()
        ),
    );
}

fn case1_context_parts(iterations: usize, deterministic: bool) -> (Config, Environment) {
    let mut cfg = Config::from_preset("case1").unwrap().with_seed(7);
    cfg.reduction.iterations = iterations;
    cfg.reduction.deterministic = deterministic;
    let env = generate_full_lcs(&cfg.env).unwrap();
    (cfg, env)
}

#[test]
fn criterion_6_loop_invariants() {
    let (cfg, env) = case1_context_parts(11, true);
    let hyper = cfg.learner_hyper();
    let ctx = LoopContext {
        env: &env,
        env_cfg: &cfg.env,
        cfg: &cfg.reduction,
        learner: &hyper,
        mpc: &cfg.mpc,
    };
    let cost = QuadCost::identity(cfg.env.n, cfg.env.m);
    let mut state = init_state(&ctx).unwrap();
    let (mut tr_order, mut inside, mut first_input) = (true, true, true);
    for _ in 0..cfg.reduction.iterations {
        let tr_before = state.buffer.trust_region(cfg.reduction.eta).unwrap();
        let end_before = state.buffer.ids().end;
        run_iteration(&mut state, &ctx).unwrap();
        let (theta_i, tr_i) = state.checkpoints.last().unwrap();
        tr_order &= *tr_i == tr_before && *theta_i == state.theta;
        let added = state.buffer.ids().end - end_before;
        for r in state.buffer.iter().skip(state.buffer.len() - added) {
            inside &= r.inputs().iter().all(|u| tr_before.contains(u));
            // Replay the planner: each applied input is the projected first input of a fresh plan.
            let mut previous: Option<MpcPlan> = None;
            let mut warm: Option<DVector<f64>> = None;
            for (t, u) in r.inputs().iter().enumerate() {
                let x = &r.trajectory.states[t];
                let p = plan(theta_i, x, &cost, tr_i, &cfg.mpc, previous.as_ref()).unwrap();
                first_input &= tr_i.project(p.first_input()) == *u;
                let (next, lambda) = lcs_step_warm(env.theta(), x, u, warm.as_ref()).unwrap();
                first_input &= next == r.trajectory.states[t + 1];
                warm = Some(lambda);
                previous = Some(p);
            }
        }
    }
    let ids = state.buffer.ids();
    let fifo = state.buffer.len() == 50 && ids == (10..60);
    let records = state.curves.len() == cfg.reduction.iterations;

    let (cfg_a, env_a) = case1_context_parts(3, true);
    let run_once = |cfg: &Config| {
        let hyper = cfg.learner_hyper();
        let ctx = LoopContext {
            env: &env_a,
            env_cfg: &cfg.env,
            cfg: &cfg.reduction,
            learner: &hyper,
            mpc: &cfg.mpc,
        };
        let (s, _) = run(&ctx, None).unwrap();
        (s.theta.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), s.curves.to_csv())
    };
    let first = run_once(&cfg_a);
    let bit_exact = first == run_once(&cfg_a);
    let mut threaded = cfg_a.clone();
    threaded.reduction.deterministic = false;
    let threads_agree = first == run_once(&threaded);

    let pass = tr_order && inside && first_input && fifo && records && bit_exact && threads_agree;
    report(
        6,
        pass,
        format!(
            "FIFO buffer holds ids {ids:?} after 11 iterations: {fifo}; trust region from pre-rollout buffer: {tr_order}; inputs inside it: {inside}; first input only (replayed): {first_input}; one record per iteration: {records}; bit-exact rerun: {bit_exact}; threaded run identical: {threads_agree}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_lemma_diagnostics() {
    let mut cfg = Config::from_preset("case1").unwrap().with_seed(11);
    cfg.experiment.eval.heldout = 5;
    cfg.experiment.eval.random_rollouts = 0;
    let env = generate_full_lcs(&cfg.env).unwrap();
    let set = EvalSet::draw(&env, &cfg.env, &cfg.experiment.eval, cfg.reduction.rollout_horizon, 5).unwrap();
    let cost = QuadCost::identity(cfg.env.n, cfg.env.m);
    let baseline = f_mpc_baseline(&env, &cost, &set.x0s, &cfg.mpc, cfg.reduction.rollout_horizon, 10.0).unwrap();
    let same = lemma_diagnostics(env.theta(), env.theta(), &baseline.rollouts, cfg.mpc.horizon, 1e-4).unwrap();
    let identical_ok = same.zeroth_order < 1e-6 && same.first_order < 1e-6 && same.windows > 0;

    let mut improved = 0;
    let mut detail = Vec::new();
    for (seed, r) in case1_trials() {
        let Ok(t) = r else { continue };
        let (Some(first), Some(l0), Some(l1)) = (&t.initial, t.initial.as_ref().and_then(|e| e.lemma), t.eval.lemma) else {
            continue;
        };
        let down = l1.zeroth_order < l0.zeroth_order && l1.first_order < l0.first_order && t.eval.gap < first.gap;
        improved += down as usize;
        detail.push(format!(
            "seed {seed}: zeroth {:.3}→{:.3}, first {:.3}→{:.3}, gap {:.1}→{:.1}",
            l0.zeroth_order, l1.zeroth_order, l0.first_order, l1.first_order, first.gap, t.eval.gap
        ));
    }
    let trend_ok = improved >= 4;
    report(
        7,
        identical_ok && trend_ok,
        format!(
            "θ_g = θ_f diagnostics {:.1e}/{:.1e} over {} windows (< 1e-6): {identical_ok}; decreasing from first to last iteration in {improved} of {} seeds (≥ 4): {trend_ok}; {}",
            same.zeroth_order,
            same.first_order,
            same.windows,
            CASE1_SEEDS.len(),
            detail.join("; ")
        ),
    );
    assert!(identical_ok);
}

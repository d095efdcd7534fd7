//! Plan with the full-order model and run it in closed loop on the true system.

use hybrid_reduction::env::{generate_full_lcs, sample_x0, EnvConfig};
use hybrid_reduction::metrics::rollout_cost;
use hybrid_reduction::mpc::{plan, receding_rollout, MpcSettings, QuadCost, TrustRegion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> hybrid_reduction::Result<()> {
    let cfg = EnvConfig::with_dims(6, 2, 8);
    let env = generate_full_lcs(&cfg)?;
    let cost = QuadCost::identity(6, 2);
    let tr = TrustRegion::symmetric(2, 10.0);
    let settings = MpcSettings::default();
    let x0 = sample_x0(&cfg, &mut ChaCha8Rng::seed_from_u64(3));

    let p = plan(env.theta(), &x0, &cost, &tr, &settings, None)?;
    println!("open-loop plan: objective {:.4}, first input {:.4?}", p.objective, p.first_input().as_slice());

    let mut e = env.fresh();
    let rollout = receding_rollout(&mut e, env.theta(), &cost, &tr, &settings, 20, &x0).map_err(|f| f.error)?;
    let seconds: f64 = rollout.plans.iter().map(|p| p.wall_seconds).sum();
    println!(
        "closed loop over 20 steps: cost {:.4}, {} plans at {:.0} plans/s, {} degraded",
        rollout_cost(&rollout, &cost),
        rollout.plans.len(),
        rollout.plans.len() as f64 / seconds,
        rollout.degraded_plans()
    );
    println!("final state norm {:.4}", rollout.trajectory.final_state().norm());
    Ok(())
}

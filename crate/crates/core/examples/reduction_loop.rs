//! Learn a reduced model from on-policy MPC data and print the learning curve.
//!
//! `cargo run --release --example reduction_loop -- [iterations] [seed]`

use hybrid_reduction::env::{generate_full_lcs, EnvConfig};
use hybrid_reduction::learner::ViolationHyper;
use hybrid_reduction::mpc::MpcSettings;
use hybrid_reduction::reduction::{run, LoopConfig, LoopContext};

fn main() -> hybrid_reduction::Result<()> {
    let mut args = std::env::args().skip(1).map(|s| s.parse::<u64>().ok());
    let iterations = args.next().flatten().unwrap_or(10) as usize;
    let seed = args.next().flatten().unwrap_or(0);

    let env_cfg = EnvConfig {
        seed,
        ..EnvConfig::with_dims(6, 2, 8)
    };
    let env = generate_full_lcs(&env_cfg)?;
    let cfg = LoopConfig {
        iterations,
        seed,
        ..LoopConfig::default()
    };
    let learner = ViolationHyper::default();
    let mpc = MpcSettings::default();
    let ctx = LoopContext {
        env: &env,
        env_cfg: &env_cfg,
        cfg: &cfg,
        learner: &learner,
        mpc: &mpc,
    };
    let (state, timing) = run(&ctx, None)?;
    println!("iter  on-policy ME%   mean cost   modes f/g  buffer");
    for r in &state.curves.records {
        println!(
            "{:4}  {:12.3}  {:10.2}  {:5}/{:<3}  {:6}",
            r.iteration, r.on_policy_me, r.mean_cost, r.modes_f, r.modes_g, r.buffer_size
        );
    }
    println!("{:.0} plans/s with the reduced model", timing.plans_per_second());
    Ok(())
}

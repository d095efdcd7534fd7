//! Fit a three-multiplier LCS to random-policy data from an eight-multiplier system.

use hybrid_reduction::env::{generate_full_lcs, sample_x0, EnvConfig};
use hybrid_reduction::learner::{init_params, train, ViolationHyper};
use hybrid_reduction::lcs::LcsDims;
use hybrid_reduction::metrics::{model_modes, relative_model_error};
use hybrid_reduction::rollout::random_rollout;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> hybrid_reduction::Result<()> {
    let cfg = EnvConfig::with_dims(6, 2, 8);
    let env = generate_full_lcs(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut e = env.fresh();
    let mut data = Vec::new();
    for _ in 0..40 {
        let x0 = sample_x0(&cfg, &mut rng);
        data.extend(random_rollout(&mut e, &cfg, &x0, 20, &mut rng)?.datapoints());
    }

    let hyper = ViolationHyper {
        epochs: 200,
        ..ViolationHyper::default()
    };
    let mut theta = init_params(LcsDims::new(6, 2, 3), &mut rng)?;
    println!("before: model error {:.2}%", relative_model_error(&theta, &data)?);
    for round in 0..3 {
        let (next, report) = train(&theta, &data, &hyper, &mut rng)?;
        theta = next;
        println!(
            "round {round}: loss {:.4e} -> {:.4e}, model error {:.2}%, {} modes on the data",
            report.initial_loss,
            report.final_loss,
            relative_model_error(&theta, &data)?,
            model_modes(&theta, &data)?
        );
    }
    Ok(())
}

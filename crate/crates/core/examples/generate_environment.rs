//! Draw a random full-order system and count the modes a random policy visits.

use hybrid_reduction::env::{generate_full_lcs, sample_x0, EnvConfig};
use hybrid_reduction::lcs::{count_distinct, DEFAULT_MODE_THRESHOLD};
use hybrid_reduction::linalg::spectral_radius;
use hybrid_reduction::rollout::random_rollout;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> hybrid_reduction::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = EnvConfig {
        seed,
        ..EnvConfig::with_dims(6, 2, 8)
    };
    let env = generate_full_lcs(&cfg)?;
    println!(
        "seed {seed}: accepted draw {}, spectral radius of A {:.4}, gamma {:.4}",
        env.attempt,
        spectral_radius(env.theta().a()),
        env.theta().gamma()
    );

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut e = env.fresh();
    let mut rollouts = Vec::new();
    for k in 1..=200 {
        let x0 = sample_x0(&cfg, &mut rng);
        rollouts.push(random_rollout(&mut e, &cfg, &x0, 20, &mut rng)?);
        if [10, 50, 100, 200].contains(&k) {
            let modes = count_distinct(rollouts.iter().flat_map(|r| r.trajectory.signatures_at(DEFAULT_MODE_THRESHOLD)));
            println!("{k:4} random episodes: {modes} distinct modes");
        }
    }
    Ok(())
}

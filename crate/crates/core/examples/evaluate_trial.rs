//! One complete trial: fresh system, reduction loop, held-out comparison with full-order MPC.

use hybrid_reduction::harness::{run_trial, Config};

fn main() -> hybrid_reduction::Result<()> {
    let iterations = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(25);
    let mut cfg = Config::from_preset("case1")?;
    cfg.reduction.iterations = iterations;
    cfg.experiment.evaluate_first_iteration = true;
    let t = run_trial(&cfg, 1, None)?;
    for (label, e) in [("first iteration", t.initial.as_ref()), ("final", Some(&t.eval))] {
        let Some(e) = e else { continue };
        println!(
            "{label}: gap {:.2}% (J_g {:.2} vs J_f {:.2}), on-policy ME {:.2}%, modes in g {}",
            e.gap, e.cost_g, e.cost_f, e.on_policy_me, e.modes_g
        );
        if let Some(l) = e.lemma {
            println!("  model mismatch along planned windows: {:.4} (states), {:.4} (input sensitivity)", l.zeroth_order, l.first_order);
        }
    }
    println!(
        "random-policy modes of the full system {}, model error there {:.1}%",
        t.eval.random_modes_f, t.eval.random_me
    );
    Ok(())
}

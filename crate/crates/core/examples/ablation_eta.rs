//! Sweep the trust-region width on the first case and report gap and model error per value.

use hybrid_reduction::harness::{ablation, AblationAxis, Config};

fn main() -> hybrid_reduction::Result<()> {
    let mut cfg = Config::from_preset("case1")?;
    cfg.experiment.axis = Some(AblationAxis::Eta);
    cfg.experiment.grid = vec![5.0, 20.0, 80.0];
    cfg.experiment.seeds = vec![0, 1];
    cfg.reduction.iterations = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(15);
    cfg.validate()?;
    let summary = ablation(&cfg, &std::env::temp_dir().join("hybrid-reduction-ablation"))?;
    print!("{}", summary.to_csv());
    Ok(())
}

//! Run the synthetic case table for a few seeds and print it as CSV.
//!
//! `cargo run --release --example table2 -- case1,case2 0,1,2`

use hybrid_reduction::harness::{table2, Config};
use hybrid_reduction::metrics::EvalReport;

fn main() -> hybrid_reduction::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = Config::default();
    cfg.experiment.cases = args.next().unwrap_or_else(|| "case1".into()).split(',').map(String::from).collect();
    if let Some(seeds) = args.next() {
        cfg.experiment.seeds = seeds.split(',').filter_map(|s| s.parse().ok()).collect();
    }
    cfg.experiment.parallel = std::thread::available_parallelism().map_or(1, |n| n.get());
    cfg.validate()?;
    let out = std::env::temp_dir().join("hybrid-reduction-table2");
    let summary = table2(&cfg, &out)?;
    println!("{}", EvalReport::table_header());
    for r in &summary.reports {
        println!("{}", r.table_row());
    }
    println!("per-trial artifacts in {}", out.display());
    Ok(())
}

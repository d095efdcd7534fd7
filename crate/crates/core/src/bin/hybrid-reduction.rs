use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hybrid_reduction::harness::{self, AblationAxis, Config};
use hybrid_reduction::metrics::EvalReport;
use hybrid_reduction::Result;

/// Learn low-mode LCS models of random hybrid systems from closed-loop MPC data.
#[derive(Parser)]
#[command(version)]
struct Cli {
    /// TOML config with env, loop, learner, mpc, solvers and experiment blocks
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// start from a named case (case1..case7) before applying the config file
    #[arg(long, global = true)]
    preset: Option<String>,
    /// output directory (or file, for generate-env)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// run everything sequentially on one thread
    #[arg(long, global = true)]
    deterministic: bool,
    /// worker threads for independent trials
    #[arg(long, global = true)]
    parallel: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a full-order system and write its parameters
    GenerateEnv {
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the reduction loop and evaluate the final model
    Train {
        /// environment file; drawn from the config when omitted
        #[arg(long)]
        env: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a stored reduced model against full-order MPC
    Evaluate {
        #[arg(long)]
        env: PathBuf,
        #[arg(long)]
        theta: PathBuf,
        /// input bounds for the reduced planner; the baseline box otherwise
        #[arg(long)]
        trust_region: Option<PathBuf>,
    },
    /// Table of the synthetic cases, one fresh system per seed
    Table2 {
        /// comma-separated presets
        #[arg(long, value_delimiter = ',')]
        cases: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Sweep one loop hyperparameter
    Ablation {
        /// horizon, new_rollouts, buffer_capacity or eta
        #[arg(long)]
        axis: Option<String>,
        #[arg(long, value_delimiter = ',')]
        grid: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
}

fn out_dir(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn print_report(report: &EvalReport) {
    println!("{}", EvalReport::table_header());
    println!("{}", report.table_row());
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let mut cfg = Config::load(cli.config.as_deref(), cli.preset.as_deref(), std::env::vars())?;
    if cli.deterministic {
        cfg.reduction.deterministic = true;
    }
    if let Some(p) = cli.parallel {
        cfg.experiment.parallel = p;
    }
    let set_seed = |cfg: &mut Config, seed: Option<u64>| {
        if let Some(s) = seed {
            *cfg = cfg.with_seed(s);
        }
    };
    let partial = match &cli.command {
        Command::GenerateEnv { seed } => {
            set_seed(&mut cfg, *seed);
            cfg.validate()?;
            let out = out_dir(cli, "env.json");
            let (_, summary) = harness::generate_env(&cfg, &out)?;
            println!(
                "wrote {}: n={} m={} r_full={} spectral radius {:.4}{} screening modes {}",
                out.display(),
                summary.n,
                summary.m,
                summary.r_full,
                summary.spectral_radius,
                summary.rescaled_from.map(|r| format!(" (rescaled from {r:.4})")).unwrap_or_default(),
                summary.screen_modes
            );
            false
        }
        Command::Train { env, seed } => {
            set_seed(&mut cfg, *seed);
            cfg.validate()?;
            let environment = match env {
                Some(p) => harness::load_env(p)?,
                None => hybrid_reduction::env::generate_full_lcs(&cfg.env)?,
            };
            let out = out_dir(cli, "run");
            let (summary, timing) = harness::train(&cfg, &environment, &out)?;
            let e = &summary.evaluation;
            println!(
                "{} iterations: on-policy ME {:.3}%, gap {:.3}%, modes in g {}, random-policy modes in f {}",
                summary.iterations, e.on_policy_me, e.gap, e.modes_g, e.random_modes_f
            );
            println!("planning rate {:.1} plans/s; artifacts in {}", timing.plans_per_second, out.display());
            false
        }
        Command::Evaluate { env, theta, trust_region } => {
            let environment = harness::load_env(env)?;
            let theta = hybrid_reduction::lcs::io::read_params(theta)?;
            let tr = trust_region.as_deref().map(harness::read_trust_region).transpose()?;
            let report = harness::evaluate(&cfg, &environment, &theta, tr.as_ref(), &out_dir(cli, "eval"))?;
            print_report(&report);
            false
        }
        Command::Table2 { cases, seeds } => {
            if !cases.is_empty() {
                cfg.experiment.cases = cases.clone();
            }
            if !seeds.is_empty() {
                cfg.experiment.seeds = seeds.clone();
            }
            cfg.validate()?;
            let summary = harness::table2(&cfg, &out_dir(cli, "table2"))?;
            println!("{}", EvalReport::table_header());
            for r in &summary.reports {
                println!("{}", r.table_row());
            }
            for f in &summary.failures {
                eprintln!("{} seed {} failed: {}", f.group, f.seed, f.error);
            }
            summary.is_partial()
        }
        Command::Ablation { axis, grid, seeds } => {
            if let Some(a) = axis {
                cfg.experiment.axis = Some(a.parse::<AblationAxis>()?);
            }
            if !grid.is_empty() {
                cfg.experiment.grid = grid.clone();
            }
            if !seeds.is_empty() {
                cfg.experiment.seeds = seeds.clone();
            }
            cfg.validate()?;
            let summary = harness::ablation(&cfg, &out_dir(cli, "ablation"))?;
            print!("{}", summary.to_csv());
            for f in &summary.failures {
                eprintln!("{} seed {} failed: {}", f.group, f.seed, f.error);
            }
            summary.is_partial()
        }
    };
    if partial {
        eprintln!("some trials failed; aggregates cover the successful ones");
        return Ok(ExitCode::from(4));
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[loop]
iterations = 2
rollout_horizon = 8
new_rollouts = 3
buffer_capacity = 8
initial_rollouts = 4

[learner]
epochs = 15

[experiment.eval]
heldout = 3
random_rollouts = 5
fd_step = 0.0
"#;

fn cli(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hybrid-reduction"));
    cmd.args(args).env_remove("RUST_LOG");
    for (k, _) in std::env::vars() {
        if k.starts_with("HYRED_") {
            cmd.env_remove(k);
        }
    }
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn write_small_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    fs::write(&path, SMALL).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn environment_files_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for p in [&a, &b] {
        let out = cli(&["generate-env", "--seed", "3", "--out", p.to_str().unwrap()], &[]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let c = dir.path().join("c.json");
    cli(&["generate-env", "--seed", "4", "--out", c.to_str().unwrap()], &[]);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn bad_configuration_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("env.json");
    let out = cli(&["generate-env", "--out", out_path.to_str().unwrap()], &[("HYRED_ENV__N", "0")]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("env.n"));

    let cfg = dir.path().join("typo.toml");
    fs::write(&cfg, "[loop]\niteratons = 3\n").unwrap();
    let out = cli(&["--config", cfg.to_str().unwrap(), "generate-env", "--out", out_path.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 2);

    let out = cli(&["--preset", "case9", "generate-env"], &[]);
    assert_eq!(code(&out), 2);

    let out = cli(&["ablation", "--axis", "width", "--grid", "1"], &[]);
    assert_eq!(code(&out), 2);
}

#[test]
fn unusable_environment_draws_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(
        &["generate-env", "--out", dir.path().join("env.json").to_str().unwrap()],
        &[("HYRED_ENV__SCREEN_BOUND", "1e-9"), ("HYRED_ENV__MAX_ATTEMPTS", "2")],
    );
    assert_eq!(code(&out), 3);
}

#[test]
fn failed_trials_mark_the_table_partial() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_small_config(dir.path());
    let out = cli(
        &["--config", &cfg, "--out", dir.path().join("t2").to_str().unwrap(), "table2", "--cases", "case1", "--seeds", "0"],
        &[("HYRED_ENV__SCREEN_BOUND", "1e-9"), ("HYRED_ENV__MAX_ATTEMPTS", "2")],
    );
    assert_eq!(code(&out), 4);
    let summary = fs::read_to_string(dir.path().join("t2/summary.json")).unwrap();
    assert!(summary.contains("\"incomplete\""));
}

#[test]
fn deterministic_training_and_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_small_config(dir.path());
    let env = dir.path().join("env.json");
    let env_s = env.to_str().unwrap();
    assert_eq!(code(&cli(&["--config", &cfg, "generate-env", "--seed", "1", "--out", env_s], &[])), 0);

    let mut summaries = Vec::new();
    for run in ["r1", "r2"] {
        let out_dir = dir.path().join(run);
        let out = cli(
            &["--config", &cfg, "--deterministic", "--out", out_dir.to_str().unwrap(), "train", "--env", env_s, "--seed", "1"],
            &[],
        );
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        for f in ["summary.json", "timing.json", "theta_final.json", "trust_region.json"] {
            assert!(out_dir.join(f).exists(), "missing {f}");
        }
        summaries.push(fs::read(out_dir.join("summary.json")).unwrap());
    }
    assert_eq!(summaries[0], summaries[1]);

    let r1 = dir.path().join("r1");
    let eval_dir = dir.path().join("eval");
    let out = cli(
        &[
            "--config",
            &cfg,
            "--out",
            eval_dir.to_str().unwrap(),
            "evaluate",
            "--env",
            env_s,
            "--theta",
            r1.join("theta_final.json").to_str().unwrap(),
            "--trust-region",
            r1.join("trust_region.json").to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(eval_dir.join("report.json").exists() && eval_dir.join("report.csv").exists());

    // A truncated model file is a parse error.
    let bad = dir.path().join("bad.json");
    let mut text = fs::read_to_string(r1.join("theta_final.json")).unwrap();
    text.truncate(text.len() / 2);
    fs::write(&bad, text).unwrap();
    let out = cli(&["--config", &cfg, "evaluate", "--env", env_s, "--theta", bad.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 2);
}

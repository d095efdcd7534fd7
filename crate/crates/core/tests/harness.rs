use hybrid_reduction::env::generate_full_lcs;
use hybrid_reduction::harness::{
    ablation, read_trust_region, run_on_env, table2, write_trust_region, AblationAxis, Config,
};
use hybrid_reduction::mpc::TrustRegion;
use nalgebra::DVector;

fn small() -> Config {
    let mut cfg = Config::from_preset("case1").unwrap();
    cfg.reduction.iterations = 2;
    cfg.reduction.rollout_horizon = 8;
    cfg.reduction.new_rollouts = 3;
    cfg.reduction.buffer_capacity = 8;
    cfg.reduction.initial_rollouts = 4;
    cfg.learner.epochs = 10;
    cfg.experiment.eval.heldout = 3;
    cfg.experiment.eval.random_rollouts = 5;
    cfg.experiment.eval.fd_step = 0.0;
    cfg.reduction.deterministic = true;
    cfg
}

#[test]
fn zero_iterations_evaluates_the_initial_model() {
    let mut cfg = small();
    cfg.reduction.iterations = 0;
    let env = generate_full_lcs(&cfg.env).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let t = run_on_env(&cfg, &env, Some(dir.path())).unwrap();
    assert!(t.curves.is_empty());
    assert!(t.eval.on_policy_me.is_finite());
    assert!(dir.path().join("theta_final.json").exists());
    let tr = read_trust_region(&dir.path().join("trust_region.json")).unwrap();
    assert_eq!(tr, t.trust_region);
}

#[test]
fn first_checkpoint_is_evaluated_on_request() {
    let mut cfg = small();
    cfg.experiment.evaluate_first_iteration = true;
    let env = generate_full_lcs(&cfg.env).unwrap();
    let t = run_on_env(&cfg, &env, None).unwrap();
    assert_eq!(t.curves.len(), 2);
    let first = t.initial.expect("first checkpoint evaluated");
    // Both checkpoints face the same baseline.
    assert_eq!(first.cost_f, t.eval.cost_f);
}

#[test]
fn trust_region_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tr.json");
    let tr = TrustRegion::new(DVector::from_vec(vec![0.1, -0.3]), DVector::from_vec(vec![2.0, 0.5])).unwrap();
    write_trust_region(&tr, &path).unwrap();
    assert_eq!(read_trust_region(&path).unwrap(), tr);
    std::fs::write(&path, "{\"schema_version\": 99}").unwrap();
    assert_eq!(read_trust_region(&path).unwrap_err().exit_code(), 2);
}

#[test]
fn single_point_ablation() {
    let mut cfg = small();
    cfg.experiment.axis = Some(AblationAxis::Eta);
    cfg.experiment.grid = vec![5.0];
    cfg.experiment.seeds = vec![0];
    let dir = tempfile::tempdir().unwrap();
    let s = ablation(&cfg, dir.path()).unwrap();
    assert!(!s.is_partial());
    assert_eq!(s.rows.len(), 1);
    assert_eq!(s.rows[0].trials, 1);
    assert!(s.to_csv().lines().nth(2).unwrap().starts_with("eta,5,1,"));
    assert!(dir.path().join("ablation.csv").exists());
}

#[test]
fn integer_axes_reject_fractions() {
    let mut cfg = small();
    assert!(AblationAxis::Horizon.apply(&mut cfg, 2.5).is_err());
    assert!(AblationAxis::NewRollouts.apply(&mut cfg, 0.0).is_err());
    AblationAxis::BufferCapacity.apply(&mut cfg, 12.0).unwrap();
    assert_eq!(cfg.reduction.buffer_capacity, 12);
}

#[test]
fn tiny_table_aggregates_each_case() {
    let mut cfg = small();
    cfg.experiment.cases = vec!["case1".into(), "case2".into()];
    cfg.experiment.seeds = vec![0, 1];
    cfg.experiment.parallel = 2;
    let dir = tempfile::tempdir().unwrap();
    let s = table2(&cfg, dir.path()).unwrap();
    assert!(!s.is_partial(), "{:?}", s.failures);
    assert_eq!(s.reports.len(), 2);
    assert_eq!(s.reports[1].n, 10);
    for f in ["table2.csv", "summary.json", "curves_case1.csv", "curves_case2.csv"] {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }
    assert!(dir.path().join("case2/seed_1").is_dir());
}

#[test]
fn layered_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(&path, "[loop]\niterations = 7\neta = 3.0\n").unwrap();
    let vars = vec![("HYRED_LOOP__ETA".to_string(), "4.5".to_string()), ("UNRELATED".into(), "x".into())];
    let cfg = Config::load(Some(&path), Some("case3"), vars).unwrap();
    assert_eq!(cfg.env.n, 20);
    assert_eq!(cfg.reduction.iterations, 7);
    assert_eq!(cfg.reduction.eta, 4.5);
    let back = Config::from_toml_str(&cfg.to_toml()).unwrap();
    assert_eq!(back, cfg);
}

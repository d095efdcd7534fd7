//! Layered experiment configuration: preset, then file, then environment overrides.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::learner::ViolationHyper;
use crate::metrics::EvalConfig;
use crate::mpc::MpcSettings;
use crate::reduction::LoopConfig;
use crate::solvers::qp::DEFAULT_QP_TOL;

/// Environment variables `HYRED_<BLOCK>__<KEY>=<value>` override config entries.
pub const ENV_PREFIX: &str = "HYRED_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// tolerance of the learner's per-datapoint QP
    pub qp_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { qp_tol: DEFAULT_QP_TOL }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    /// MPC horizon T
    Horizon,
    NewRollouts,
    BufferCapacity,
    Eta,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 4] = [Self::Horizon, Self::NewRollouts, Self::BufferCapacity, Self::Eta];

    pub fn name(self) -> &'static str {
        match self {
            Self::Horizon => "horizon",
            Self::NewRollouts => "new_rollouts",
            Self::BufferCapacity => "buffer_capacity",
            Self::Eta => "eta",
        }
    }

    /// Set this axis of `cfg` to `value`.
    pub fn apply(self, cfg: &mut Config, value: f64) -> Result<()> {
        let count = || {
            if value >= 1.0 && value.fract() == 0.0 && value <= 1e6 {
                Ok(value as usize)
            } else {
                Err(Error::config(
                    "experiment.grid",
                    format!("axis `{}` needs positive integers, got {value}", self.name()),
                ))
            }
        };
        match self {
            Self::Horizon => cfg.mpc.horizon = count()?,
            Self::NewRollouts => cfg.reduction.new_rollouts = count()?,
            Self::BufferCapacity => cfg.reduction.buffer_capacity = count()?,
            Self::Eta => cfg.reduction.eta = value,
        }
        Ok(())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "horizon" | "T" => Ok(Self::Horizon),
            "new_rollouts" | "R_new" => Ok(Self::NewRollouts),
            "buffer_capacity" | "R_buffer" => Ok(Self::BufferCapacity),
            "eta" => Ok(Self::Eta),
            _ => Err(Error::config(
                "experiment.axis",
                format!("unknown axis `{s}` (expected horizon, new_rollouts, buffer_capacity or eta)"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// one trial per seed; each trial draws its own environment
    pub seeds: Vec<u64>,
    /// presets run by `table2`
    pub cases: Vec<String>,
    pub axis: Option<AblationAxis>,
    pub grid: Vec<f64>,
    /// worker threads for independent trials
    pub parallel: usize,
    /// a case is aggregated only if at least this fraction of its trials succeed
    pub min_success_fraction: f64,
    /// also evaluate the model trained in the first iteration
    pub evaluate_first_iteration: bool,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            cases: vec!["case1".into()],
            axis: None,
            grid: Vec::new(),
            parallel: 1,
            min_success_fraction: 0.7,
            evaluate_first_iteration: false,
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// preset the other blocks were layered on
    pub preset: Option<String>,
    pub env: EnvConfig,
    #[serde(rename = "loop")]
    pub reduction: LoopConfig,
    pub learner: ViolationHyper,
    pub mpc: MpcSettings,
    pub solvers: SolverConfig,
    pub experiment: ExperimentConfig,
}

/// Dimensions of one synthetic case.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Preset {
    pub name: &'static str,
    pub n: usize,
    pub m: usize,
    pub r_full: usize,
    pub r_reduced: usize,
}

pub const PRESETS: [Preset; 7] = [
    Preset { name: "case1", n: 6, m: 2, r_full: 8, r_reduced: 3 },
    Preset { name: "case2", n: 10, m: 3, r_full: 12, r_reduced: 3 },
    Preset { name: "case3", n: 20, m: 3, r_full: 15, r_reduced: 1 },
    Preset { name: "case4", n: 20, m: 3, r_full: 15, r_reduced: 2 },
    Preset { name: "case5", n: 20, m: 3, r_full: 15, r_reduced: 3 },
    Preset { name: "case6", n: 20, m: 3, r_full: 15, r_reduced: 5 },
    Preset { name: "case7", n: 30, m: 3, r_full: 15, r_reduced: 3 },
];

pub fn preset(name: &str) -> Result<Preset> {
    PRESETS
        .iter()
        .copied()
        .find(|p| p.name == name)
        .ok_or_else(|| Error::config("preset", format!("unknown preset `{name}` (expected case1..case7)")))
}

impl Preset {
    /// Overwrite the dimensions in `cfg`, leaving every other setting alone.
    pub fn apply(&self, cfg: &mut Config) {
        cfg.preset = Some(self.name.to_string());
        cfg.env.n = self.n;
        cfg.env.m = self.m;
        cfg.env.r_full = self.r_full;
        cfg.reduction.r_reduced = self.r_reduced;
    }
}

fn parse_error(path: &str, e: impl std::fmt::Display) -> Error {
    Error::Parse {
        path: path.to_string(),
        message: e.to_string().trim_end().to_string(),
    }
}

/// Recursively overlay `top` onto `base`.
fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn override_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

impl Config {
    pub fn from_preset(name: &str) -> Result<Self> {
        let mut cfg = Config::default();
        preset(name)?.apply(&mut cfg);
        Ok(cfg)
    }

    /// Build the effective config: `preset` (argument, else the file's `preset` key),
    /// then the file, then `HYRED_*` entries of `vars`.
    pub fn load<I>(path: Option<&Path>, preset_name: Option<&str>, vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let (file_table, file_preset) = match path {
            Some(p) => {
                let label = p.display().to_string();
                let text = std::fs::read_to_string(p)?;
                // Typed pass first so errors carry line and field information.
                let typed: Config = toml::from_str(&text).map_err(|e| parse_error(&label, e))?;
                let table: Table = text.parse().map_err(|e| parse_error(&label, e))?;
                (Some(table), typed.preset)
            }
            None => (None, None),
        };
        let base = match preset_name.map(str::to_string).or(file_preset) {
            Some(name) => Self::from_preset(&name)?,
            None => Self::default(),
        };
        let mut table = Table::try_from(&base).expect("config serializes");
        if let Some(t) = file_table {
            merge(&mut table, t);
        }
        let mut overridden = Vec::new();
        for (key, raw) in vars {
            let Some(rest) = key.strip_prefix(ENV_PREFIX) else { continue };
            let path: Vec<String> = rest.to_ascii_lowercase().split("__").map(str::to_string).collect();
            if path.iter().any(|s| s.is_empty()) {
                return Err(Error::config(key, "expected HYRED_<BLOCK>__<KEY>"));
            }
            let mut cursor = &mut table;
            for seg in &path[..path.len() - 1] {
                let entry = cursor.entry(seg.clone()).or_insert_with(|| Value::Table(Table::new()));
                cursor = match entry {
                    Value::Table(t) => t,
                    _ => return Err(Error::config(key, format!("`{seg}` is not a block"))),
                };
            }
            cursor.insert(path[path.len() - 1].clone(), override_value(&raw));
            overridden.push(key);
        }
        let cfg: Config = Value::Table(table).try_into().map_err(|e: toml::de::Error| {
            let origin = if overridden.is_empty() {
                path.map(|p| p.display().to_string()).unwrap_or_else(|| "defaults".into())
            } else {
                format!("environment overrides {}", overridden.join(", "))
            };
            parse_error(&origin, e)
        })?;
        if let Some(name) = &cfg.preset {
            preset(name)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| parse_error("<string>", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.reduction.validate()?;
        self.learner_hyper().validate()?;
        self.mpc.validate()?;
        if !(self.solvers.qp_tol > 0.0 && self.solvers.qp_tol <= 1e-4) {
            return Err(Error::config("solvers.qp_tol", "must lie in (0, 1e-4]"));
        }
        let exp = &self.experiment;
        if exp.seeds.is_empty() {
            return Err(Error::config("experiment.seeds", "needs at least one seed"));
        }
        if exp.parallel == 0 {
            return Err(Error::config("experiment.parallel", "must be at least 1"));
        }
        if !(exp.min_success_fraction > 0.0 && exp.min_success_fraction <= 1.0) {
            return Err(Error::config("experiment.min_success_fraction", "must lie in (0, 1]"));
        }
        for case in &exp.cases {
            preset(case)?;
        }
        if let Some(axis) = exp.axis {
            let mut probe = self.clone();
            for &v in &exp.grid {
                axis.apply(&mut probe, v)?;
            }
        }
        exp.eval.validate()
    }

    /// Learner settings with the solver block applied.
    pub fn learner_hyper(&self) -> ViolationHyper {
        ViolationHyper {
            qp_tol: self.solvers.qp_tol,
            ..self.learner.clone()
        }
    }

    /// Point the environment and loop seeds at one trial.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.env.seed = seed;
        cfg.reduction.seed = seed;
        cfg
    }

    pub fn case_name(&self) -> &str {
        self.preset.as_deref().unwrap_or("custom")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars(list: &[(&str, &str)]) -> Vec<(String, String)> {
        list.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn layers_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "preset = \"case2\"\n[loop]\niterations = 7\neta = 5.0\n").unwrap();
        let cfg = Config::load(Some(&path), None, vars(&[("HYRED_LOOP__ETA", "9.5"), ("OTHER", "1")])).unwrap();
        assert_eq!((cfg.env.n, cfg.env.m, cfg.env.r_full), (10, 3, 12));
        assert_eq!(cfg.reduction.iterations, 7);
        assert_eq!(cfg.reduction.eta, 9.5);
        let cfg = Config::load(Some(&path), Some("case3"), vars(&[])).unwrap();
        assert_eq!(cfg.reduction.r_reduced, 1);
        assert_eq!(cfg.reduction.eta, 5.0);
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[loop]\niterations = 3\netaa = 1.0\n").unwrap();
        let err = Config::load(Some(&path), None, vars(&[])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("etaa") && msg.contains("line 3"), "{msg}");
        assert_eq!(err.exit_code(), 2);
        let err = Config::load(None, None, vars(&[("HYRED_MPC__HORIZN", "3")])).unwrap_err();
        assert!(err.to_string().contains("horizn"), "{err}");
    }

    #[test]
    fn invalid_dims_name_the_field() {
        let err = Config::load(None, None, vars(&[("HYRED_ENV__N", "0")])).unwrap_err();
        assert!(err.to_string().contains("env.n"), "{err}");
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = Config::from_preset("case5").unwrap();
        cfg.experiment.axis = Some(AblationAxis::Eta);
        cfg.experiment.grid = vec![5.0, 20.0];
        assert_eq!(Config::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn integer_axes_reject_fractions() {
        let mut cfg = Config::default();
        assert!(AblationAxis::Horizon.apply(&mut cfg, 2.5).is_err());
        AblationAxis::BufferCapacity.apply(&mut cfg, 20.0).unwrap();
        assert_eq!(cfg.reduction.buffer_capacity, 20);
    }
}

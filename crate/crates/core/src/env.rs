//! Randomly generated full-order systems used as the ground-truth world.

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lcs::{count_distinct, lcs_rollout, lcs_step_warm, LcsDims, LcsParams, LcsParts, ModeSignature, Trajectory, DEFAULT_MODE_THRESHOLD};
use crate::linalg::spectral_radius;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// state dimension
    pub n: usize,
    /// input dimension
    pub m: usize,
    /// complementarity dimension of the full-order system
    pub r_full: usize,
    /// entries of A are drawn from U[-scale_a, scale_a]
    pub scale_a: f64,
    /// entries of every other block are drawn from U[-scale, scale]
    pub scale: f64,
    /// A is rescaled so its spectral radius does not exceed this; `None` disables
    pub max_spectral_radius: Option<f64>,
    pub seed: u64,
    /// x0 ~ U[-x0_range, x0_range]
    pub x0_range: f64,
    /// random inputs ~ U[-input_range, input_range]
    pub input_range: f64,
    pub screen_horizon: usize,
    pub screen_bound: f64,
    pub max_attempts: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            n: 6,
            m: 2,
            r_full: 8,
            scale_a: 0.5,
            scale: 1.0,
            max_spectral_radius: Some(1.0),
            seed: 0,
            x0_range: 4.0,
            input_range: 10.0,
            screen_horizon: 20,
            screen_bound: 1e4,
            max_attempts: 100,
        }
    }
}

impl EnvConfig {
    pub fn with_dims(n: usize, m: usize, r_full: usize) -> Self {
        Self {
            n,
            m,
            r_full,
            ..Self::default()
        }
    }

    pub fn dims(&self) -> LcsDims {
        LcsDims::new(self.n, self.m, self.r_full)
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("env.n", self.n), ("env.m", self.m), ("env.r_full", self.r_full)] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.r_full > 64 {
            return Err(Error::config("env.r_full", "at most 64 complementarity variables are supported"));
        }
        for (field, v) in [
            ("env.scale_a", self.scale_a),
            ("env.scale", self.scale),
            ("env.x0_range", self.x0_range),
            ("env.input_range", self.input_range),
            ("env.screen_bound", self.screen_bound),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be positive and finite, got {v}")));
            }
        }
        if let Some(rho) = self.max_spectral_radius {
            if !(rho > 0.0 && rho.is_finite()) {
                return Err(Error::config("env.max_spectral_radius", format!("must be positive, got {rho}")));
            }
        }
        if self.screen_horizon == 0 || self.max_attempts == 0 {
            return Err(Error::config("env.screen_horizon", "screening horizon and attempts must be positive"));
        }
        Ok(())
    }
}

/// A full-order system together with its step log.
#[derive(Debug, Clone)]
pub struct Environment {
    theta: Arc<LcsParams>,
    steps: usize,
    log: Vec<ModeSignature>,
    /// Spectral radius of A before and after rescaling, if it was rescaled.
    pub rescaled: Option<(f64, f64)>,
    /// Index of the accepted draw.
    pub attempt: usize,
    /// Distinct modes visited by the accepted screening rollout.
    pub screen_modes: usize,
}

impl Environment {
    pub fn new(theta: LcsParams) -> Self {
        Self {
            theta: Arc::new(theta),
            steps: 0,
            log: Vec::new(),
            rescaled: None,
            attempt: 0,
            screen_modes: 0,
        }
    }

    pub fn theta(&self) -> &LcsParams {
        &self.theta
    }

    pub fn shared_theta(&self) -> Arc<LcsParams> {
        Arc::clone(&self.theta)
    }

    pub fn dims(&self) -> LcsDims {
        self.theta.dims()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn signature_log(&self) -> &[ModeSignature] {
        &self.log
    }

    /// Same handle on `θ_f` with an empty log.
    pub fn fresh(&self) -> Self {
        Self {
            theta: Arc::clone(&self.theta),
            steps: 0,
            log: Vec::new(),
            rescaled: self.rescaled,
            attempt: self.attempt,
            screen_modes: self.screen_modes,
        }
    }

    pub fn merge_log(&mut self, other: &Environment) {
        self.log.extend_from_slice(&other.log);
        self.steps += other.steps;
    }

    /// One step of `θ_f`; the signature of `Λ` is appended to the log.
    pub fn step(&mut self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        self.step_warm(x, u, None)
    }

    pub fn step_warm(
        &mut self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        warm: Option<&DVector<f64>>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let (next, big_lambda) = lcs_step_warm(&self.theta, x, u, warm)?;
        self.log.push(ModeSignature::from_lambda(&big_lambda, DEFAULT_MODE_THRESHOLD));
        self.steps += 1;
        Ok((next, big_lambda))
    }

    /// Open-loop rollout through the environment (logs every step).
    pub fn rollout(&mut self, x0: &DVector<f64>, u_seq: &[DVector<f64>]) -> Result<Trajectory> {
        let traj = lcs_rollout(&self.theta, x0, u_seq)?;
        self.log.extend_from_slice(&traj.signatures);
        self.steps += traj.horizon();
        Ok(traj)
    }

    /// `step,signature` CSV of the log.
    pub fn signature_log_csv(&self) -> String {
        let mut out = String::from("# schema_version=1 kind=signature_log\nstep,signature\n");
        for (k, s) in self.log.iter().enumerate() {
            writeln!(out, "{k},{s}").unwrap();
        }
        out
    }
}

pub fn env_step(env: &mut Environment, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    env.step(x, u)
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, s: f64) -> DMatrix<f64> {
    // Drawn row by row so the stream order matches the row-major file layout.
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(rng.random_range(-s..=s));
    }
    DMatrix::from_row_slice(rows, cols, &data)
}

fn uniform_vector(rng: &mut ChaCha8Rng, len: usize, s: f64) -> DVector<f64> {
    DVector::from_iterator(len, (0..len).map(|_| rng.random_range(-s..=s)))
}

/// Draw `(A, B, C, d, D, E, G, H, c)` in that order, entries i.i.d. uniform.
pub fn draw_parts(rng: &mut ChaCha8Rng, dims: LcsDims, scale_a: f64, scale: f64) -> LcsParts {
    let LcsDims { n, m, r } = dims;
    LcsParts {
        a: uniform_matrix(rng, n, n, scale_a),
        b: uniform_matrix(rng, n, m, scale),
        c: uniform_matrix(rng, n, r, scale),
        d: uniform_vector(rng, n, scale),
        lcp_d: uniform_matrix(rng, r, n, scale),
        lcp_e: uniform_matrix(rng, r, m, scale),
        g: uniform_matrix(rng, r, r, scale),
        h: uniform_matrix(rng, r, r, scale),
        lcp_c: uniform_vector(rng, r, scale),
    }
}

/// Generator for draw number `attempt` under `seed`.
pub fn attempt_rng(seed: u64, attempt: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(attempt as u64);
    rng
}

pub fn generate_full_lcs(cfg: &EnvConfig) -> Result<Environment> {
    cfg.validate()?;
    let dims = cfg.dims();
    for attempt in 0..cfg.max_attempts {
        let mut rng = attempt_rng(cfg.seed, attempt);
        let mut parts = draw_parts(&mut rng, dims, cfg.scale_a, cfg.scale);
        let mut rescaled = None;
        if let Some(cap) = cfg.max_spectral_radius {
            let rho = spectral_radius(&parts.a);
            if rho > cap {
                parts.a *= cap / rho;
                rescaled = Some((rho, spectral_radius(&parts.a)));
            }
        }
        let theta = match LcsParams::new(parts) {
            Ok(t) => t,
            Err(e) => {
                log::debug!("draw {attempt} rejected: {e}");
                continue;
            }
        };
        let x0 = sample_x0(cfg, &mut rng);
        let us: Vec<_> = (0..cfg.screen_horizon).map(|_| random_policy(cfg, &mut rng)).collect();
        match lcs_rollout(&theta, &x0, &us) {
            Ok(traj) if traj.states.iter().all(|x| x.norm() <= cfg.screen_bound) => {
                if let Some((before, after)) = rescaled {
                    log::info!("A rescaled from spectral radius {before:.4} to {after:.4}");
                }
                let mut env = Environment::new(theta);
                env.rescaled = rescaled;
                env.attempt = attempt;
                env.screen_modes = count_distinct(traj.signatures.iter().copied());
                return Ok(env);
            }
            Ok(_) => log::debug!("draw {attempt} rejected: screening rollout left the bound"),
            Err(e) => log::debug!("draw {attempt} rejected: {e}"),
        }
    }
    Err(Error::GenerationExhausted {
        attempts: cfg.max_attempts,
    })
}

pub fn sample_x0<R: Rng + ?Sized>(cfg: &EnvConfig, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(cfg.n, (0..cfg.n).map(|_| rng.random_range(-cfg.x0_range..=cfg.x0_range)))
}

pub fn random_policy<R: Rng + ?Sized>(cfg: &EnvConfig, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(cfg.m, (0..cfg.m).map(|_| rng.random_range(-cfg.input_range..=cfg.input_range)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lcs::lcs_step;

    #[test]
    fn generation_is_deterministic() {
        let cfg = EnvConfig {
            seed: 11,
            ..EnvConfig::with_dims(2, 1, 2)
        };
        let a = generate_full_lcs(&cfg).unwrap();
        let b = generate_full_lcs(&cfg).unwrap();
        assert_eq!(a.theta(), b.theta());
        let other = generate_full_lcs(&EnvConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a.theta(), other.theta());
    }

    #[test]
    fn entries_respect_scales() {
        let cfg = EnvConfig {
            max_spectral_radius: None,
            ..EnvConfig::with_dims(3, 2, 4)
        };
        let env = generate_full_lcs(&cfg).unwrap();
        let t = env.theta();
        assert!(t.a().amax() <= 0.5);
        for m in [t.b(), t.c(), t.lcp_d(), t.lcp_e(), t.g(), t.h()] {
            assert!(m.amax() <= 1.0);
        }
    }

    #[test]
    fn spectral_cap_applied() {
        let cfg = EnvConfig {
            scale_a: 3.0,
            ..EnvConfig::with_dims(4, 1, 2)
        };
        let env = generate_full_lcs(&cfg).unwrap();
        assert!(spectral_radius(env.theta().a()) <= 1.0 + 1e-12);
        assert!(env.rescaled.is_some());
    }

    #[test]
    fn zero_scale_rejected() {
        let cfg = EnvConfig {
            scale: 0.0,
            ..EnvConfig::with_dims(2, 1, 2)
        };
        assert!(matches!(generate_full_lcs(&cfg), Err(Error::Config { .. })));
        assert!(EnvConfig::with_dims(0, 1, 1).validate().is_err());
    }

    #[test]
    fn unstable_draws_exhaust() {
        let cfg = EnvConfig {
            scale_a: 50.0,
            max_spectral_radius: None,
            max_attempts: 3,
            ..EnvConfig::with_dims(3, 1, 1)
        };
        assert!(matches!(generate_full_lcs(&cfg), Err(Error::GenerationExhausted { attempts: 3 })));
    }

    #[test]
    fn stepping_matches_lcs_step_and_logs() {
        let cfg = EnvConfig::with_dims(3, 2, 3);
        let mut env = generate_full_lcs(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x = sample_x0(&cfg, &mut rng);
        for k in 0..5 {
            let u = random_policy(&cfg, &mut rng);
            let expected = lcs_step(env.theta(), &x, &u).unwrap();
            let got = env.step(&x, &u).unwrap();
            assert_eq!(got, expected);
            assert_eq!(env.signature_log().len(), k + 1);
            x = got.0;
        }
        assert_eq!(env.signature_log_csv().lines().count(), 2 + 5);
    }

    #[test]
    fn sampler_ranges() {
        let cfg = EnvConfig::with_dims(2, 3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert!(sample_x0(&cfg, &mut rng).amax() <= 4.0);
            assert!(random_policy(&cfg, &mut rng).amax() <= 10.0);
        }
    }
}

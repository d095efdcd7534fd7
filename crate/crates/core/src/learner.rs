//! Fitting LCS parameters with the violation loss.
//!
//! For one transition `(x, u, x')` the loss is
//!
//! ```text
//! min_{λ ≥ 0, φ ≥ 0}  ½‖A x + B u + C λ + d − x'‖²
//!                     + (1/ε) (λᵀφ + (1/2γ) ‖D x + E u + F λ + c − φ‖²)
//! ```
//!
//! with `γ = λ_min(F + Fᵀ)`. The inner problem is a strongly convex QP in
//! `(λ, φ)` whose Hessian depends on `θ` only, so it is assembled once per
//! parameter value and its principal factorizations are shared across
//! datapoints. Parameter gradients are taken at the inner minimizer.

use std::collections::HashMap;
use std::fmt::Write as _;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lcs::{LcsDims, LcsParams, LcsParts};
use crate::solvers::active_set::{solve_ineq_qp, IneqQp};
use crate::solvers::qp::{solve_qp_nonneg_warm, QpNonneg, DEFAULT_QP_TOL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViolationHyper {
    /// balance between dynamics residual and complementarity violation
    pub epsilon: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// full-buffer loss is evaluated every this many epochs for checkpointing
    pub eval_every: usize,
    /// set from the `solvers` block of the experiment config
    #[serde(skip)]
    pub qp_tol: f64,
    /// fraction of datapoints that may fail in one epoch before training aborts
    pub max_skip_fraction: f64,
    /// rescale λ after every step so that `‖C‖² = ‖F‖²/γ` (predictions are unchanged)
    pub balance: bool,
    /// steps that push `λ_min(F + Fᵀ)` below this (or below its current value, if smaller) are rejected
    pub min_gamma: f64,
}

impl Default for ViolationHyper {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 64,
            epochs: 300,
            eval_every: 10,
            qp_tol: DEFAULT_QP_TOL,
            max_skip_fraction: 0.1,
            balance: true,
            min_gamma: 1e-3,
        }
    }
}

impl ViolationHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 1e-3 && self.epsilon < 1.0) {
            return Err(Error::config("learner.epsilon", format!("must lie in (1e-3, 1), got {}", self.epsilon)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learner.learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("learner.beta1", "moment decays must lie in [0, 1)"));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::config("learner.batch_size", "batch size and eval_every must be positive"));
        }
        if !(self.qp_tol > 0.0 && self.qp_tol <= 1e-4) {
            return Err(Error::config("learner.qp_tol", "must lie in (0, 1e-4]"));
        }
        if !(self.min_gamma >= 0.0) {
            return Err(Error::config("learner.min_gamma", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.max_skip_fraction) {
            return Err(Error::config("learner.max_skip_fraction", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One observed transition.
#[derive(Debug, Clone, PartialEq)]
pub struct DataPoint {
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub x_next: DVector<f64>,
}

impl DataPoint {
    pub fn new(x: DVector<f64>, u: DVector<f64>, x_next: DVector<f64>) -> Self {
        Self { x, u, x_next }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerSolution {
    pub lambda: DVector<f64>,
    pub phi: DVector<f64>,
    pub loss: f64,
}

/// Hessian of the inner objective in `(λ, φ)` for a given `γ`.
pub fn violation_hessian_with_gamma(theta: &LcsParams, epsilon: f64, gamma: f64) -> DMatrix<f64> {
    let r = theta.dims().r;
    let f = theta.f();
    let c = theta.c();
    let eg = epsilon * gamma;
    let mut p = DMatrix::zeros(2 * r, 2 * r);
    let ll = c.transpose() * c + f.transpose() * f / eg;
    let lp = (DMatrix::identity(r, r) - f.transpose() / gamma) / epsilon;
    p.view_mut((0, 0), (r, r)).copy_from(&ll);
    p.view_mut((0, r), (r, r)).copy_from(&lp);
    p.view_mut((r, 0), (r, r)).copy_from(&lp.transpose());
    p.view_mut((r, r), (r, r)).copy_from(&(DMatrix::identity(r, r) / eg));
    p
}

pub fn violation_hessian(theta: &LcsParams, epsilon: f64) -> DMatrix<f64> {
    violation_hessian_with_gamma(theta, epsilon, theta.gamma())
}

/// Inner QP data shared by every datapoint at a fixed `θ`.
pub struct InnerQp<'a> {
    theta: &'a LcsParams,
    epsilon: f64,
    tol: f64,
    p: DMatrix<f64>,
    factors: HashMap<u64, Option<Cholesky<f64, Dyn>>>,
}

impl<'a> InnerQp<'a> {
    pub fn new(theta: &'a LcsParams, epsilon: f64, tol: f64) -> Self {
        Self {
            theta,
            epsilon,
            tol,
            p: violation_hessian(theta, epsilon),
            factors: HashMap::new(),
        }
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.p
    }

    fn residuals(&self, dp: &DataPoint) -> (DVector<f64>, DVector<f64>) {
        let e0 = self.theta.affine_next(&dp.x, &dp.u) - &dp.x_next;
        let q = self.theta.lcp_offset(&dp.x, &dp.u);
        (e0, q)
    }

    fn linear_term(&self, e0: &DVector<f64>, q: &DVector<f64>) -> DVector<f64> {
        let r = self.theta.dims().r;
        let eg = self.epsilon * self.theta.gamma();
        let mut b = DVector::zeros(2 * r);
        let bl = self.theta.c().transpose() * e0 + self.theta.f().transpose() * q / eg;
        b.rows_mut(0, r).copy_from(&bl);
        b.rows_mut(r, r).copy_from(&(-q / eg));
        b
    }

    /// Loss evaluated from its definition at `(λ, φ)`.
    pub fn loss_at(&self, dp: &DataPoint, lambda: &DVector<f64>, phi: &DVector<f64>) -> f64 {
        let (e, s) = self.full_residuals(dp, lambda, phi);
        0.5 * e.norm_squared() + (lambda.dot(phi) + 0.5 * s.norm_squared() / self.theta.gamma()) / self.epsilon
    }

    fn full_residuals(&self, dp: &DataPoint, lambda: &DVector<f64>, phi: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let (e0, q) = self.residuals(dp);
        let e = e0 + self.theta.c() * lambda;
        let s = q + self.theta.f() * lambda - phi;
        (e, s)
    }

    fn factor(&mut self, free: &[bool]) -> Option<&Cholesky<f64, Dyn>> {
        let mask = free.iter().enumerate().fold(0u64, |acc, (i, &f)| if f { acc | (1 << i) } else { acc });
        let p = &self.p;
        self.factors
            .entry(mask)
            .or_insert_with(|| {
                let idx: Vec<usize> = (0..free.len()).filter(|&i| free[i]).collect();
                let sub = DMatrix::from_fn(idx.len(), idx.len(), |i, j| p[(idx[i], idx[j])]);
                sub.cholesky()
            })
            .as_ref()
    }

    fn active_set(&mut self, b: &DVector<f64>, start: &DVector<f64>) -> Option<DVector<f64>> {
        let k = b.len();
        let g0 = &self.p * start + b;
        let mut free: Vec<bool> = (0..k).map(|i| start[i] > 0.0 || g0[i] < 0.0).collect();
        for _ in 0..=k + 1 {
            let idx: Vec<usize> = (0..k).filter(|&i| free[i]).collect();
            let rhs = DVector::from_iterator(idx.len(), idx.iter().map(|&i| -b[i]));
            let sub = self.factor(&free)?.solve(&rhs);
            let mut z = DVector::zeros(k);
            for (j, &i) in idx.iter().enumerate() {
                z[i] = sub[j];
            }
            let g = &self.p * &z + b;
            let mut changed = false;
            for i in 0..k {
                let next = if free[i] { z[i] > 0.0 } else { g[i] < 0.0 };
                changed |= next != free[i];
                free[i] = next;
            }
            if !changed {
                let z = z.map(|v| v.max(0.0));
                let g = &self.p * &z + b;
                let scale = 1.0 + b.amax();
                let kkt = z.iter().zip(g.iter()).fold(0.0f64, |acc, (zi, gi)| acc.max(zi.min(*gi).abs()));
                return (kkt <= self.tol * scale).then_some(z);
            }
        }
        None
    }

    /// Primal active-set method on `z ≥ 0`, then ADMM if that fails too.
    fn fallback(&self, b: DVector<f64>, start: &DVector<f64>) -> Result<DVector<f64>> {
        let k = b.len();
        let ineq = IneqQp {
            h: self.p.clone(),
            g: b.clone(),
            a: -DMatrix::identity(k, k),
            b: DVector::zeros(k),
        };
        let x0 = start.map(|v| v.max(0.0));
        match solve_ineq_qp(&ineq, &x0, 1e-9, 50 * (k + 1)) {
            Ok(sol) => Ok(sol.x.map(|v| v.max(0.0))),
            Err(e) => {
                log::debug!("inner QP active-set fallback failed: {e}");
                let qp = QpNonneg::new(self.p.clone(), b)?;
                Ok(solve_qp_nonneg_warm(&qp, self.tol, Some(start))?.z)
            }
        }
    }

    /// Minimize the inner problem, optionally warm-started from a previous `(λ, φ)` stack.
    pub fn solve(&mut self, dp: &DataPoint, warm: Option<&DVector<f64>>) -> Result<InnerSolution> {
        let r = self.theta.dims().r;
        let (e0, q) = self.residuals(dp);
        let b = self.linear_term(&e0, &q);
        let start = match warm {
            Some(w) if w.len() == 2 * r => w.clone(),
            _ => DVector::zeros(2 * r),
        };
        let z = match self.active_set(&b, &start) {
            Some(z) => z,
            None => self.fallback(b, &start)?,
        };
        let lambda = z.rows(0, r).into_owned();
        let phi = z.rows(r, r).into_owned();
        let loss = self.loss_at(dp, &lambda, &phi);
        Ok(InnerSolution { lambda, phi, loss })
    }
}

pub fn inner_violation_qp(theta: &LcsParams, dp: &DataPoint, hyper: &ViolationHyper) -> Result<InnerSolution> {
    InnerQp::new(theta, hyper.epsilon, hyper.qp_tol).solve(dp, None)
}

/// Derivative of `γ = λ_min(F + Fᵀ) = λ_min(2 G Gᵀ)` with respect to `G`.
fn gamma_grad_g(theta: &LcsParams) -> DMatrix<f64> {
    let f = theta.f();
    let eig = (f + f.transpose()).symmetric_eigen();
    let k = eig.eigenvalues.imin();
    let v = eig.eigenvectors.column(k).into_owned();
    (&v * v.transpose()) * theta.g() * 4.0
}

/// Accumulates parameter gradients block by block.
#[derive(Debug, Clone)]
pub struct GradAccumulator {
    dims: LcsDims,
    parts: LcsParts,
    /// gradient with respect to `F` (before chaining to G and H)
    f_bar: DMatrix<f64>,
    gamma_bar: f64,
}

impl GradAccumulator {
    pub fn new(dims: LcsDims) -> Self {
        Self {
            dims,
            parts: LcsParts::zeros(dims),
            f_bar: DMatrix::zeros(dims.r, dims.r),
            gamma_bar: 0.0,
        }
    }

    pub fn add(&mut self, theta: &LcsParams, dp: &DataPoint, sol: &InnerSolution, epsilon: f64) {
        let gamma = theta.gamma();
        let eg = epsilon * gamma;
        let e = theta.affine_next(&dp.x, &dp.u) + theta.c() * &sol.lambda - &dp.x_next;
        let s = theta.lcp_offset(&dp.x, &dp.u) + theta.f() * &sol.lambda - &sol.phi;
        let p = &mut self.parts;
        p.a.ger(1.0, &e, &dp.x, 1.0);
        p.b.ger(1.0, &e, &dp.u, 1.0);
        p.c.ger(1.0, &e, &sol.lambda, 1.0);
        p.d += &e;
        p.lcp_d.ger(1.0 / eg, &s, &dp.x, 1.0);
        p.lcp_e.ger(1.0 / eg, &s, &dp.u, 1.0);
        p.lcp_c.axpy(1.0 / eg, &s, 1.0);
        self.f_bar.ger(1.0 / eg, &s, &sol.lambda, 1.0);
        self.gamma_bar -= 0.5 * s.norm_squared() / (epsilon * gamma * gamma);
    }

    /// Gradient blocks scaled by `scale`, with `F` and `γ` chained into `G` and `H`.
    pub fn finish(mut self, theta: &LcsParams, scale: f64) -> LcsParts {
        let fb = &self.f_bar;
        self.parts.g = (fb + fb.transpose()) * theta.g();
        if self.dims.r > 0 && self.gamma_bar != 0.0 {
            self.parts.g += gamma_grad_g(theta) * self.gamma_bar;
        }
        self.parts.h = fb - fb.transpose();
        let mut parts = self.parts;
        for m in [
            &mut parts.a,
            &mut parts.b,
            &mut parts.c,
            &mut parts.lcp_d,
            &mut parts.lcp_e,
            &mut parts.g,
            &mut parts.h,
        ] {
            *m *= scale;
        }
        parts.d *= scale;
        parts.lcp_c *= scale;
        parts
    }
}

/// Gradient of the minimized loss of one datapoint, blocks in the layout of [`LcsParts`].
pub fn violation_grad(theta: &LcsParams, dp: &DataPoint, sol: &InnerSolution, hyper: &ViolationHyper) -> LcsParts {
    let mut acc = GradAccumulator::new(theta.dims());
    acc.add(theta, dp, sol, hyper.epsilon);
    acc.finish(theta, 1.0)
}

/// Mean minimized loss over `data`.
pub fn mean_loss(theta: &LcsParams, data: &[DataPoint], hyper: &ViolationHyper) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidProblem("empty dataset".into()));
    }
    let mut qp = InnerQp::new(theta, hyper.epsilon, hyper.qp_tol);
    let mut total = 0.0;
    for dp in data {
        total += qp.solve(dp, None)?.loss;
    }
    Ok(total / data.len() as f64)
}

/// Rescale `λ → kλ` (so `C/k` and `k·(D, E, c)`, `F` unchanged) such that
/// `‖C‖² = ‖F‖²/γ`.
///
/// The model's predictions are unchanged, but the violation loss is not: its
/// complementarity term scales with `k²`, so without a fixed scale the
/// optimizer drifts towards a large `C` and a vanishing penalty. In this scale
/// the curvature of the dynamics term (`CᵀC`) and of the complementarity term
/// (`FᵀF/γ`) match, leaving `ε` as the only weight between them.
pub fn balance_scale(theta: &LcsParams) -> LcsParams {
    let c_norm = theta.c().norm();
    let f_norm = theta.f().norm();
    let gamma = theta.gamma();
    if !(c_norm > 1e-12 && f_norm > 1e-12 && gamma > 0.0) {
        return theta.clone();
    }
    let k = c_norm * gamma.sqrt() / f_norm;
    let mut parts = theta.parts().clone();
    parts.c /= k;
    parts.lcp_d *= k;
    parts.lcp_e *= k;
    parts.lcp_c *= k;
    LcsParams::new(parts).expect("rescaling keeps F unchanged")
}

/// Every entry i.i.d. U[-0.5, 0.5], redrawn until `F + Fᵀ` is positive definite.
pub fn init_params<R: Rng + ?Sized>(dims: LcsDims, rng: &mut R) -> Result<LcsParams> {
    for _ in 0..100 {
        let flat: Vec<f64> = (0..dims.num_params()).map(|_| rng.random_range(-0.5..=0.5)).collect();
        if let Ok(theta) = LcsParams::from_flat(dims, &flat) {
            return Ok(theta);
        }
    }
    Err(Error::GenerationExhausted { attempts: 100 })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// mean of the minibatch losses seen during the epoch
    pub mean_batch_loss: f64,
    /// best full-data mean loss evaluated so far
    pub best_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub history: Vec<EpochRecord>,
    pub skipped: usize,
    pub rejected_steps: usize,
}

impl TrainReport {
    pub fn history_csv(&self) -> String {
        let mut out = String::from("# schema_version=1 kind=loss_history\nepoch,mean_loss,min_loss\n");
        for r in &self.history {
            writeln!(out, "{},{:e},{:e}", r.epoch, r.mean_batch_loss, r.best_loss).unwrap();
        }
        out
    }
}

/// Losses below this are treated as an exact fit and end training.
const LOSS_FLOOR: f64 = 1e-14;

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], h: &ViolationHyper) {
        self.t += 1;
        let c1 = 1.0 - h.beta1.powi(self.t);
        let c2 = 1.0 - h.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = h.beta1 * self.m[i] + (1.0 - h.beta1) * grad[i];
            self.v[i] = h.beta2 * self.v[i] + (1.0 - h.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= h.learning_rate * m_hat / (v_hat.sqrt() + 1e-8);
        }
    }
}

/// Fit `θ` to `data` by minibatch Adam on the violation loss.
///
/// The returned parameters are the best full-data iterate seen, so the mean
/// loss never exceeds its value at `theta_in`.
pub fn train<R: Rng + ?Sized>(
    theta_in: &LcsParams,
    data: &[DataPoint],
    hyper: &ViolationHyper,
    rng: &mut R,
) -> Result<(LcsParams, TrainReport)> {
    hyper.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidProblem("training needs at least one datapoint".into()));
    }
    let dims = theta_in.dims();
    let theta_in = if hyper.balance { balance_scale(theta_in) } else { theta_in.clone() };
    let initial_loss = mean_loss(&theta_in, data, hyper)?;
    let mut best = (initial_loss, theta_in.clone());
    let mut theta = theta_in;
    let mut flat = theta.to_flat();
    let mut adam = Adam::new(flat.len());
    let mut warm: Vec<Option<DVector<f64>>> = vec![None; data.len()];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(hyper.epochs);
    let mut skipped_total = 0;
    let mut rejected_steps = 0;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(rng.random());

    for epoch in 0..hyper.epochs {
        if best.0 <= LOSS_FLOOR {
            break;
        }
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut epoch_count = 0;
        let mut skipped = 0;
        for batch in order.chunks(hyper.batch_size) {
            let mut qp = InnerQp::new(&theta, hyper.epsilon, hyper.qp_tol);
            let mut acc = GradAccumulator::new(dims);
            let mut used = 0;
            for &i in batch {
                match qp.solve(&data[i], warm[i].as_ref()) {
                    Ok(sol) => {
                        epoch_loss += sol.loss;
                        epoch_count += 1;
                        used += 1;
                        acc.add(&theta, &data[i], &sol, hyper.epsilon);
                        let mut z = sol.lambda.clone().resize_vertically(2 * dims.r, 0.0);
                        z.rows_mut(dims.r, dims.r).copy_from(&sol.phi);
                        warm[i] = Some(z);
                    }
                    Err(e) => {
                        log::warn!("epoch {epoch}: datapoint {i} skipped: {e}");
                        skipped += 1;
                    }
                }
            }
            if skipped as f64 > hyper.max_skip_fraction * data.len() as f64 {
                return Err(Error::TrainingAborted {
                    skipped,
                    total: data.len(),
                });
            }
            if used == 0 {
                continue;
            }
            let grad = acc.finish(&theta, 1.0 / used as f64).flatten(dims);
            let mut candidate = flat.clone();
            adam.step(&mut candidate, &grad, hyper);
            let floor = hyper.min_gamma.min(theta.gamma());
            match LcsParams::from_flat(dims, &candidate) {
                Ok(next) if next.gamma() < floor => rejected_steps += 1,
                Ok(next) if hyper.balance => {
                    theta = balance_scale(&next);
                    flat = theta.to_flat();
                }
                Ok(next) => {
                    theta = next;
                    flat = candidate;
                }
                Err(_) => rejected_steps += 1,
            }
        }
        skipped_total += skipped;
        if (epoch + 1) % hyper.eval_every == 0 || epoch + 1 == hyper.epochs {
            let loss = mean_loss(&theta, data, hyper)?;
            if loss < best.0 {
                best = (loss, theta.clone());
            }
        }
        history.push(EpochRecord {
            epoch,
            mean_batch_loss: if epoch_count > 0 { epoch_loss / epoch_count as f64 } else { f64::NAN },
            best_loss: best.0,
        });
    }
    let (final_loss, theta_out) = best;
    Ok((
        theta_out,
        TrainReport {
            initial_loss,
            final_loss,
            history,
            skipped: skipped_total,
            rejected_steps,
        },
    ))
}

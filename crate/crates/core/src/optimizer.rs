//! Alternating policy optimizer: Riemannian steps on the Gaussian
//! components followed by softmax-parameterized weight steps, each batch of
//! rollouts serving a full round of inner updates.
//!
//! Gaussian steps ascend the free energy `J` along
//!
//! ```text
//! μ ← μ + λ·∇_μ J,    Σ ← R_Σ(λ·grad_Σ J)
//! ```
//!
//! with `λ` found by backtracking until `W²(π_new, π_ref) ≤ c_max`, where
//! `π_ref` is the policy that collected the batch. Weight steps descend
//! `W²(π(η), π_ref)/τ − J(π(η))` in `η`.

use std::time::Instant;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bures::{bw_grad, bw_retract, w2_gaussian_sq, SpdMatrix};
use crate::env::{rollout, success_rate, TaskSpec};
use crate::error::{Error, Result};
use crate::gmm::{BlockSplit, Gaussian, Gmm};
use crate::linalg::{Matrix, Vector};
use crate::ot::{w2_gmm_plan, w2_gmm_sq, w2_weight_grad, EntropicSchedule, OtSolver};
use crate::policy_grad::{
    advantage_grads, chain_to_eta, entropy_augment, free_energy_estimate, softmax, weights_to_eta, Baseline,
    EuclideanGrads, RolloutBatch,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// Bures-Wasserstein retraction on covariances.
    #[default]
    Riemannian,
    /// Euclidean descent on means and Cholesky factors.
    CholeskyAblation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    /// Proximal weight of the W² term in the weight objective.
    pub tau: f64,
    /// Initial line-search step.
    pub lambda0: f64,
    /// Line-search shrink factor.
    pub alpha: f64,
    pub lambda_min: f64,
    /// Largest W² to the batch policy accepted for a Gaussian step.
    pub c_max: f64,
    /// Weight steps that would move the policy further than this (in W²)
    /// from the batch policy are rejected.
    pub w2_trust_radius: f64,
    /// Entropy weight.
    pub beta: f64,
    /// Discount.
    pub gamma: f64,
    pub episodes_per_iter: usize,
    pub inner_gauss_iters: usize,
    pub inner_weight_iters: usize,
    pub weight_lr: f64,
    pub mode: UpdateMode,
    pub baseline: Baseline,
    /// Divide advantages by their batch standard deviation.
    pub normalize_advantages: bool,
    /// Solver for the step constraint.
    pub constraint_solver: OtSolver,
    /// Schedule for the plans whose potentials give the weight gradient.
    pub sinkhorn: EntropicSchedule,
    /// Inner loops stop once the relative change of the batch `J` stays
    /// below this for `inner_patience` consecutive iterations.
    pub inner_rel_tol: f64,
    pub inner_patience: usize,
    /// Outer iterations without a relative improvement of `plateau_rel`
    /// in the best `J` before a plateau is flagged.
    pub plateau_window: usize,
    pub plateau_rel: f64,
    pub stop_on_plateau: bool,
    /// Step of the finite differences used by the ablation for the W² term.
    pub fd_step: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let c_max = 0.1;
        Self {
            tau: 1.0,
            lambda0: 0.1,
            alpha: 0.5,
            lambda_min: 1e-6,
            c_max,
            w2_trust_radius: 4.0 * c_max,
            beta: 1e-3,
            gamma: 0.99,
            episodes_per_iter: 10,
            inner_gauss_iters: 10,
            inner_weight_iters: 10,
            weight_lr: 0.05,
            mode: UpdateMode::Riemannian,
            baseline: Baseline::TimeIndexed,
            normalize_advantages: true,
            constraint_solver: OtSolver::default(),
            sinkhorn: EntropicSchedule::default(),
            inner_rel_tol: 1e-4,
            inner_patience: 3,
            plateau_window: 5,
            plateau_rel: 1e-3,
            stop_on_plateau: false,
            fd_step: 1e-6,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tau", self.tau),
            ("lambda0", self.lambda0),
            ("lambda_min", self.lambda_min),
            ("c_max", self.c_max),
            ("w2_trust_radius", self.w2_trust_radius),
            ("weight_lr", self.weight_lr),
            ("fd_step", self.fd_step),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Input(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Input(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Input("beta must be ≥ 0".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Input("gamma must lie in (0, 1]".into()));
        }
        if self.episodes_per_iter == 0 {
            return Err(Error::Input("episodes_per_iter must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Policy being optimized together with its softmax parameters and the
/// policy that collected the current batch.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub policy: Gmm,
    pub eta: Vector,
    pub reference: Gmm,
    pub gauss_steps: usize,
    pub weight_steps: usize,
}

impl OptimizerState {
    pub fn new(policy: Gmm) -> Result<Self> {
        let eta = weights_to_eta(policy.weights());
        let policy = policy.with_weights(softmax(&eta))?;
        Ok(Self { reference: policy.clone(), policy, eta, gauss_steps: 0, weight_steps: 0 })
    }

    /// Makes the current policy the reference of a fresh batch.
    pub fn rebase(&mut self) {
        self.reference = self.policy.clone();
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearchParams {
    pub lambda0: f64,
    pub alpha: f64,
    pub lambda_min: f64,
    pub c_max: f64,
}

impl From<&OptimizerConfig> for LineSearchParams {
    fn from(cfg: &OptimizerConfig) -> Self {
        Self { lambda0: cfg.lambda0, alpha: cfg.alpha, lambda_min: cfg.lambda_min, c_max: cfg.c_max }
    }
}

#[derive(Debug, Clone)]
pub struct LineSearchOutcome<X> {
    pub step: f64,
    pub point: X,
    /// False when the search fell back to the start point.
    pub accepted: bool,
    /// Constraint value at the returned point (0 on fallback).
    pub constraint: f64,
}

/// Backtracking under a constraint: start at `λ₀`, multiply by `α` while
/// `c(x(λ)) > c_max` and `λ > λ_min`; if `λ` ends below `λ_min` return
/// `(λ₀, x₀)` unmoved. A candidate whose construction fails counts as a
/// violation. Ending at `λ = λ_min` with a violated constraint also falls
/// back, so the returned point is always feasible.
pub fn constrained_line_search<X: Clone>(
    x0: &X,
    params: &LineSearchParams,
    mut candidate: impl FnMut(f64) -> Result<X>,
    mut constraint: impl FnMut(&X) -> Result<f64>,
) -> LineSearchOutcome<X> {
    let mut eval = |lambda: f64| -> (Option<X>, f64) {
        match candidate(lambda) {
            Ok(x) => match constraint(&x) {
                Ok(c) if c.is_finite() => (Some(x), c),
                _ => (None, f64::INFINITY),
            },
            Err(_) => (None, f64::INFINITY),
        }
    };
    let mut lambda = params.lambda0;
    let (mut x, mut c) = eval(lambda);
    while c > params.c_max && lambda > params.lambda_min {
        lambda *= params.alpha;
        (x, c) = eval(lambda);
    }
    match x {
        Some(x) if lambda >= params.lambda_min && c <= params.c_max => {
            LineSearchOutcome { step: lambda, point: x, accepted: true, constraint: c }
        }
        _ => LineSearchOutcome { step: params.lambda0, point: x0.clone(), accepted: false, constraint: 0.0 },
    }
}

/// Result of one Gaussian step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: f64,
    pub accepted: bool,
    /// `W²(π_new, π_ref)` of the accepted point.
    pub constraint: f64,
}

fn batch_grads(state: &OptimizerState, batch: &RolloutBatch, cfg: &OptimizerConfig, split: &BlockSplit) -> Result<EuclideanGrads> {
    let augmented = entropy_augment(batch, &state.policy, split)?;
    advantage_grads(&augmented, &state.policy, split, cfg.baseline, cfg.normalize_advantages)
}

fn apply_gaussian_search(
    state: &OptimizerState,
    cfg: &OptimizerConfig,
    candidate: impl FnMut(f64) -> Result<Vec<Gaussian>>,
) -> Result<(OptimizerState, StepReport)> {
    let reference = state.reference.clone();
    let policy = state.policy.clone();
    let solver = cfg.constraint_solver;
    let outcome = constrained_line_search(
        &policy.components().to_vec(),
        &LineSearchParams::from(cfg),
        candidate,
        |comps: &Vec<Gaussian>| w2_gmm_sq(&policy.with_components(comps.clone())?, &reference, &solver),
    );
    let mut next = state.clone();
    if outcome.accepted {
        next.policy = policy.with_components(outcome.point)?;
    }
    next.gauss_steps += 1;
    Ok((next, StepReport { step: outcome.step, accepted: outcome.accepted, constraint: outcome.constraint }))
}

/// One Riemannian ascent step on means and covariances; weights untouched.
pub fn gaussian_step(
    state: &OptimizerState,
    batch: &RolloutBatch,
    cfg: &OptimizerConfig,
    split: &BlockSplit,
) -> Result<(OptimizerState, StepReport)> {
    let grads = batch_grads(state, batch, cfg, split)?;
    gaussian_step_with(state, &grads, cfg)
}

/// [`gaussian_step`] with precomputed Euclidean gradients of `J`.
pub fn gaussian_step_with(
    state: &OptimizerState,
    grads: &EuclideanGrads,
    cfg: &OptimizerConfig,
) -> Result<(OptimizerState, StepReport)> {
    let comps = state.policy.components().to_vec();
    let sigmas = comps.iter().map(|c| SpdMatrix::new(c.cov().clone())).collect::<Result<Vec<_>>>()?;
    let directions: Vec<Matrix> = grads.d_covs.iter().zip(&sigmas).map(|(g, s)| bw_grad(g, s)).collect();
    let zero = grads.d_means.iter().all(|v| v.iter().all(|x| *x == 0.0))
        && directions.iter().all(|m| m.iter().all(|x| *x == 0.0));
    if zero {
        let mut next = state.clone();
        next.gauss_steps += 1;
        return Ok((next, StepReport { step: 0.0, accepted: false, constraint: 0.0 }));
    }
    apply_gaussian_search(state, cfg, |lambda| {
        comps
            .iter()
            .zip(&sigmas)
            .zip(grads.d_means.iter().zip(&directions))
            .map(|((c, sigma), (dm, dc))| {
                let cov = bw_retract(sigma, &(dc * lambda))?;
                Gaussian::new(c.mean() + dm * lambda, cov.into_inner())
            })
            .collect()
    })
}

/// Lower-triangular part.
fn lower(m: &Matrix) -> Matrix {
    m.lower_triangle()
}

/// Gradient of `W²(π, π_ref)` in means and Cholesky factors, by central
/// differences of `Σⱼ Pᵢⱼ W₂²(N(μᵢ, LᵢLᵢᵀ), N_ref,j)` with the coupling
/// `P` held fixed (it is optimal, so its own variation does not contribute
/// to first order).
fn w2_grad_cholesky(policy: &Gmm, reference: &Gmm, cfg: &OptimizerConfig) -> Result<(Vec<Vector>, Vec<Matrix>)> {
    let plan = w2_gmm_plan(policy, reference, &cfg.sinkhorn)?;
    let d = policy.dim();
    let h = cfg.fd_step;
    let mut d_means = Vec::with_capacity(policy.n());
    let mut d_chols = Vec::with_capacity(policy.n());
    for (i, comp) in policy.components().iter().enumerate() {
        let cost = |mean: &Vector, l: &Matrix| -> Result<f64> {
            let g = Gaussian::new(mean.clone(), l * l.transpose())?;
            let mut total = 0.0;
            for (j, r) in reference.components().iter().enumerate() {
                let p = plan.plan[(i, j)];
                if p > 0.0 {
                    total += p * w2_gaussian_sq(&g, r)?;
                }
            }
            Ok(total)
        };
        let mean = comp.mean().clone();
        let l = comp.chol_factor();
        let mut gm = Vector::zeros(d);
        for k in 0..d {
            let mut up = mean.clone();
            let mut dn = mean.clone();
            up[k] += h;
            dn[k] -= h;
            gm[k] = (cost(&up, &l)? - cost(&dn, &l)?) / (2.0 * h);
        }
        let mut gl = Matrix::zeros(d, d);
        for r in 0..d {
            for c in 0..=r {
                let mut up = l.clone();
                let mut dn = l.clone();
                up[(r, c)] += h;
                dn[(r, c)] -= h;
                gl[(r, c)] = (cost(&mean, &up)? - cost(&mean, &dn)?) / (2.0 * h);
            }
        }
        d_means.push(gm);
        d_chols.push(gl);
    }
    Ok((d_means, d_chols))
}

/// Euclidean descent on `(μ, L)` for `W²(π, π_ref)/2τ − J(π)`, with the
/// same constrained line search as the Riemannian step.
pub fn gaussian_step_ablation(
    state: &OptimizerState,
    batch: &RolloutBatch,
    cfg: &OptimizerConfig,
    split: &BlockSplit,
) -> Result<(OptimizerState, StepReport)> {
    let grads = batch_grads(state, batch, cfg, split)?;
    gaussian_step_ablation_with(state, &grads, cfg)
}

pub fn gaussian_step_ablation_with(
    state: &OptimizerState,
    grads: &EuclideanGrads,
    cfg: &OptimizerConfig,
) -> Result<(OptimizerState, StepReport)> {
    let comps = state.policy.components().to_vec();
    let chols: Vec<Matrix> = comps.iter().map(Gaussian::chol_factor).collect();
    let (w_means, w_chols) = w2_grad_cholesky(&state.policy, &state.reference, cfg)?;
    let scale = 1.0 / (2.0 * cfg.tau);
    // Descent direction of the objective: ∇J − ∇W²/2τ, with ∂J/∂L = 2·G·L.
    let d_means: Vec<Vector> = grads.d_means.iter().zip(&w_means).map(|(g, w)| g - w * scale).collect();
    let d_chols: Vec<Matrix> = grads
        .d_covs
        .iter()
        .zip(&chols)
        .zip(&w_chols)
        .map(|((g, l), w)| lower(&(g * l * 2.0)) - w * scale)
        .collect();
    let zero = d_means.iter().all(|v| v.iter().all(|x| *x == 0.0)) && d_chols.iter().all(|m| m.iter().all(|x| *x == 0.0));
    if zero {
        let mut next = state.clone();
        next.gauss_steps += 1;
        return Ok((next, StepReport { step: 0.0, accepted: false, constraint: 0.0 }));
    }
    apply_gaussian_search(state, cfg, |lambda| {
        comps
            .iter()
            .zip(&chols)
            .zip(d_means.iter().zip(&d_chols))
            .map(|((c, l), (dm, dl))| {
                let nl = l + dl * lambda;
                Gaussian::new(c.mean() + dm * lambda, &nl * nl.transpose())
            })
            .collect()
    })
}

/// Result of one weight step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightReport {
    /// Whether the proximal W² term contributed.
    pub used_w2: bool,
    /// Whether the step was kept (it stays inside the trust radius).
    pub accepted: bool,
    pub drift: f64,
}

/// One descent step on `η` for `W²(π(η), π_ref)/τ − J(π(η))`.
pub fn weight_step(
    state: &OptimizerState,
    batch: &RolloutBatch,
    cfg: &OptimizerConfig,
    split: &BlockSplit,
) -> Result<(OptimizerState, WeightReport)> {
    let grads = batch_grads(state, batch, cfg, split)?;
    weight_step_with(state, &grads.d_weights, cfg)
}

const WEIGHT_BACKTRACKS: usize = 8;

/// [`weight_step`] with a precomputed `∂J/∂ω`.
pub fn weight_step_with(
    state: &OptimizerState,
    d_weights: &Vector,
    cfg: &OptimizerConfig,
) -> Result<(OptimizerState, WeightReport)> {
    let weights = state.policy.weights().clone();
    let (w2_term, used_w2) = match w2_weight_grad(&state.policy, &state.reference, &cfg.sinkhorn) {
        Ok(f) => (chain_to_eta(&f, &weights)? / cfg.tau, true),
        Err(e) if !e.is_numeric() => return Err(e),
        Err(e) => {
            warn!("weight step without the W² term: {e}");
            (Vector::zeros(weights.len()), false)
        }
    };
    let j_term = chain_to_eta(d_weights, &weights)?;
    let direction = (w2_term - j_term) * cfg.weight_lr;
    let mut next = state.clone();
    next.weight_steps += 1;
    // Halve the step until the drift fits inside the trust radius.
    let mut scale = 1.0;
    let mut drift = f64::INFINITY;
    let mut accepted = false;
    for _ in 0..WEIGHT_BACKTRACKS {
        let eta = &state.eta - &direction * scale;
        let policy = state.policy.with_weights(softmax(&eta))?;
        drift = w2_gmm_sq(&policy, &state.reference, &cfg.constraint_solver)?;
        if drift <= cfg.w2_trust_radius {
            next.eta = eta;
            next.policy = policy;
            accepted = true;
            break;
        }
        scale *= 0.5;
    }
    Ok((next, WeightReport { used_w2, accepted, drift }))
}

/// Stop rule on the per-iteration batch success rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessCriterion {
    pub threshold: f64,
    /// Consecutive batches at or above the threshold needed to stop.
    pub streak: usize,
}

impl Default for SuccessCriterion {
    fn default() -> Self {
        Self { threshold: 0.9, streak: 2 }
    }
}

/// One row per outer iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub outer_iter: usize,
    pub env_steps: usize,
    #[serde(rename = "J_estimate")]
    pub j_estimate: f64,
    pub success_rate: f64,
    pub w2_drift: f64,
    pub wallclock_s: f64,
}

pub const METRICS_HEADER: &str = "outer_iter,env_steps,J_estimate,success_rate,w2_drift,wallclock_s";

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub policy: Gmm,
    pub metrics: Vec<MetricsRow>,
    /// Policy in force after each outer iteration, with the env-step count.
    pub snapshots: Vec<(usize, Gmm)>,
    pub succeeded: bool,
    /// Env steps at the first batch with success rate at the threshold.
    pub first_success_step: Option<usize>,
    /// Env steps at the first batch with every rollout successful.
    pub first_perfect_step: Option<usize>,
    pub plateau_flagged: bool,
    /// Inner loops aborted by numeric errors.
    pub numeric_aborts: usize,
    /// Gaussian steps accepted, with their constraint values.
    pub accepted_constraints: Vec<f64>,
    pub gauss_steps: usize,
    pub weight_steps: usize,
}

fn rel_change(prev: f64, next: f64) -> f64 {
    (next - prev).abs() / prev.abs().max(1e-12)
}

/// Runs rollouts and inner optimization rounds until the success criterion
/// holds or `max_env_steps` is spent.
///
/// Each outer iteration rolls out `M` episodes with the current policy,
/// logs the batch success rate and `J`, and (unless the criterion is met)
/// runs the Gaussian inner loop and then the weight inner loop on that
/// batch.
pub fn optimize<R: Rng + ?Sized>(
    initial: &Gmm,
    task: &TaskSpec,
    cfg: &OptimizerConfig,
    rng: &mut R,
    criterion: &SuccessCriterion,
    max_env_steps: usize,
) -> Result<RunOutcome> {
    cfg.validate()?;
    task.validate()?;
    let split = task.split();
    if initial.dim() != split.dim() {
        return Err(Error::Dimension { expected: split.dim(), got: initial.dim() });
    }
    let clock = Instant::now();
    let mut state = OptimizerState::new(initial.clone())?;
    let mut out = RunOutcome {
        policy: initial.clone(),
        metrics: Vec::new(),
        snapshots: Vec::new(),
        succeeded: false,
        first_success_step: None,
        first_perfect_step: None,
        plateau_flagged: false,
        numeric_aborts: 0,
        accepted_constraints: Vec::new(),
        gauss_steps: 0,
        weight_steps: 0,
    };
    let mut env_steps = 0;
    let mut streak = 0;
    let mut best_j = f64::NEG_INFINITY;
    let mut since_best = 0;
    let mut outer = 0;
    while env_steps < max_env_steps {
        state.rebase();
        let mut batch = rollout(&state.policy, &split, task, cfg.episodes_per_iter, rng)?;
        batch.gamma = cfg.gamma;
        batch.beta = cfg.beta;
        env_steps += batch.steps();
        let rate = success_rate(&batch, task);
        let j0 = free_energy_estimate(&batch, &state.policy, &split)?;
        if rate >= criterion.threshold {
            streak += 1;
            out.first_success_step.get_or_insert(env_steps);
        } else {
            streak = 0;
        }
        if rate >= 1.0 {
            out.first_perfect_step.get_or_insert(env_steps);
        }
        if j0 > best_j + cfg.plateau_rel * best_j.abs() {
            best_j = j0;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.plateau_window {
                out.plateau_flagged = true;
            }
        }
        let done = streak >= criterion.streak.max(1);
        if !done && !(cfg.stop_on_plateau && out.plateau_flagged) {
            match inner_rounds(&mut state, &batch, cfg, &split, &mut out) {
                Ok(()) => {}
                Err(e) if e.is_numeric() => {
                    warn!("inner loop aborted: {e}");
                    out.numeric_aborts += 1;
                }
                Err(e) => return Err(e),
            }
        }
        let drift = match w2_gmm_sq(&state.policy, &state.reference, &cfg.constraint_solver) {
            Ok(v) => v,
            Err(e) if e.is_numeric() => {
                warn!("drift not computable: {e}");
                f64::NAN
            }
            Err(e) => return Err(e),
        };
        out.metrics.push(MetricsRow {
            outer_iter: outer,
            env_steps,
            j_estimate: j0,
            success_rate: rate,
            w2_drift: drift,
            wallclock_s: clock.elapsed().as_secs_f64(),
        });
        out.snapshots.push((env_steps, state.policy.clone()));
        outer += 1;
        if done {
            out.succeeded = true;
            break;
        }
        if cfg.stop_on_plateau && out.plateau_flagged {
            break;
        }
    }
    out.policy = state.policy;
    out.gauss_steps = state.gauss_steps;
    out.weight_steps = state.weight_steps;
    Ok(out)
}

/// Gaussian inner loop then weight inner loop on one batch.
fn inner_rounds(
    state: &mut OptimizerState,
    batch: &RolloutBatch,
    cfg: &OptimizerConfig,
    split: &BlockSplit,
    out: &mut RunOutcome,
) -> Result<()> {
    let mut j_prev = free_energy_estimate(batch, &state.policy, split)?;
    let mut calm = 0;
    for _ in 0..cfg.inner_gauss_iters {
        let grads = batch_grads(state, batch, cfg, split)?;
        let (next, report) = match cfg.mode {
            UpdateMode::Riemannian => gaussian_step_with(state, &grads, cfg)?,
            UpdateMode::CholeskyAblation => gaussian_step_ablation_with(state, &grads, cfg)?,
        };
        *state = next;
        if !report.accepted {
            break;
        }
        out.accepted_constraints.push(report.constraint);
        let j = free_energy_estimate(batch, &state.policy, split)?;
        calm = if rel_change(j_prev, j) < cfg.inner_rel_tol { calm + 1 } else { 0 };
        j_prev = j;
        if calm >= cfg.inner_patience {
            break;
        }
    }
    calm = 0;
    for _ in 0..cfg.inner_weight_iters {
        let grads = batch_grads(state, batch, cfg, split)?;
        let (next, report) = weight_step_with(state, &grads.d_weights, cfg)?;
        *state = next;
        if !report.accepted {
            break;
        }
        let j = free_energy_estimate(batch, &state.policy, split)?;
        calm = if rel_change(j_prev, j) < cfg.inner_rel_tol { calm + 1 } else { 0 };
        j_prev = j;
        if calm >= cfg.inner_patience {
            break;
        }
    }
    Ok(())
}

//! Likelihood-ratio estimates of the free-energy objective and of its
//! Euclidean gradients with respect to the joint mixture parameters.
//!
//! The policy is `π(a|s) = π(s,a) / π(s)`, so the score of every parameter
//! `ξ` splits into a joint term and a state-marginal term:
//!
//! ```text
//! ∇_ξ log π(a|s) = ∇_ξ log π(s,a) − ∇_ξ log π(s)
//! ```
//!
//! The marginal term only touches parameter entries of the state block.
//! Each per-step score is weighted by the (entropy-augmented) discounted
//! reward-to-go.

use serde::{Deserialize, Serialize};

use crate::env::DoneReason;
use crate::error::{Error, Result};
use crate::gmm::{BlockSplit, Conditioner, Gaussian, Gmm};
use crate::linalg::{log_sum_exp, softmax_log, symmetrize, Matrix, Vector};
use crate::ot::WEIGHT_FLOOR;

/// One transition `(s_t, a_t, r_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub state: Vector,
    pub action: Vector,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub done_reason: DoneReason,
}

impl Trajectory {
    pub fn new(steps: Vec<Step>, done_reason: DoneReason) -> Result<Self> {
        let first = steps.first().ok_or_else(|| Error::Input("trajectory has no steps".into()))?;
        let (n, m) = (first.state.len(), first.action.len());
        for st in &steps {
            if st.state.len() != n {
                return Err(Error::Dimension { expected: n, got: st.state.len() });
            }
            if st.action.len() != m {
                return Err(Error::Dimension { expected: m, got: st.action.len() });
            }
        }
        Ok(Self { steps, done_reason })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Stopped by a collision or divergence before the horizon.
    pub fn terminated_early(&self) -> bool {
        self.done_reason != DoneReason::Horizon
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub trajectories: Vec<Trajectory>,
    pub gamma: f64,
    pub beta: f64,
}

impl RolloutBatch {
    pub fn new(trajectories: Vec<Trajectory>, gamma: f64, beta: f64) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::Input("rollout batch is empty".into()));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::Input(format!("discount {gamma} outside (0, 1]")));
        }
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::Input(format!("entropy weight {beta} must be ≥ 0")));
        }
        Ok(Self { trajectories, gamma, beta })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Total number of transitions.
    pub fn steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }
}

/// Gradient blocks of `J` with respect to means, covariances and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EuclideanGrads {
    pub d_means: Vec<Vector>,
    pub d_covs: Vec<Matrix>,
    pub d_weights: Vector,
}

impl EuclideanGrads {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            d_means: vec![Vector::zeros(d); n],
            d_covs: vec![Matrix::zeros(d, d); n],
            d_weights: Vector::zeros(n),
        }
    }

    fn scale(&mut self, t: f64) {
        self.d_means.iter_mut().for_each(|v| *v *= t);
        self.d_covs.iter_mut().for_each(|m| *m *= t);
        self.d_weights *= t;
    }

    fn add_scaled(&mut self, other: &EuclideanGrads, t: f64) {
        for (a, b) in self.d_means.iter_mut().zip(&other.d_means) {
            a.axpy(t, b, 1.0);
        }
        for (a, b) in self.d_covs.iter_mut().zip(&other.d_covs) {
            *a += b * t;
        }
        self.d_weights.axpy(t, &other.d_weights, 1.0);
    }
}

/// Variance-reduction baseline subtracted from the reward-to-go.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    None,
    /// Mean of every `R_t` in the batch.
    BatchMean,
    /// Mean of `R_t` over the trajectories still running at step `t`.
    #[default]
    TimeIndexed,
}

/// Per-component pieces of the score that only depend on the parameters.
struct ComponentScore {
    joint: Gaussian,
    state: Gaussian,
    joint_prec: Matrix,
    state_prec: Matrix,
}

/// Mixture with the precisions needed by the score precomputed.
pub struct ScoreModel {
    split: BlockSplit,
    log_weights: Vec<f64>,
    weights: Vec<f64>,
    parts: Vec<ComponentScore>,
}

impl ScoreModel {
    pub fn new(gmm: &Gmm, split: &BlockSplit) -> Result<Self> {
        if split.dim() != gmm.dim() {
            return Err(Error::Dimension { expected: gmm.dim(), got: split.dim() });
        }
        let n = split.state_dim;
        let parts = gmm
            .components()
            .iter()
            .map(|c| {
                let state = Gaussian::new(c.mean().rows(0, n).into_owned(), c.cov().view((0, 0), (n, n)).into_owned())?;
                Ok(ComponentScore {
                    joint_prec: c.precision(),
                    state_prec: state.precision(),
                    joint: c.clone(),
                    state,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let weights: Vec<f64> = gmm.weights().iter().map(|w| w.max(WEIGHT_FLOOR)).collect();
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self { split: *split, log_weights, weights, parts })
    }

    /// Joint and state-marginal responsibilities at `(s, a)`.
    pub fn responsibilities(&self, s: &Vector, a: &Vector) -> Result<(Vec<f64>, Vec<f64>)> {
        let x = self.split.join(s, a)?;
        let mut joint = Vec::with_capacity(self.parts.len());
        let mut state = Vec::with_capacity(self.parts.len());
        for (p, lw) in self.parts.iter().zip(&self.log_weights) {
            joint.push(lw + p.joint.logpdf(&x)?);
            state.push(lw + p.state.logpdf(s)?);
        }
        Ok((softmax_log(&joint), softmax_log(&state)))
    }

    /// `∇ log π(a|s)` with respect to every mean, covariance and weight,
    /// treating covariance entries as independent symmetric coordinates
    /// and weights as free (unnormalized) coordinates.
    pub fn score(&self, s: &Vector, a: &Vector) -> Result<EuclideanGrads> {
        let mut out = EuclideanGrads::zeros(self.parts.len(), self.split.dim());
        self.add_score(s, a, 1.0, &mut out)?;
        Ok(out)
    }

    fn add_score(&self, s: &Vector, a: &Vector, weight: f64, out: &mut EuclideanGrads) -> Result<()> {
        let (zj, zs) = self.responsibilities(s, a)?;
        let x = self.split.join(s, a)?;
        let n = self.split.state_dim;
        for (l, p) in self.parts.iter().enumerate() {
            let r = &x - p.joint.mean();
            let pr = &p.joint_prec * &r;
            let rs = s - p.state.mean();
            let prs = &p.state_prec * &rs;

            let gm = &mut out.d_means[l];
            gm.axpy(weight * zj[l], &pr, 1.0);
            let mut head = gm.rows_mut(0, n);
            head.axpy(-weight * zs[l], &prs, 1.0);

            // −½ ζ Σ⁻¹ (I − r rᵀ Σ⁻¹) = −½ ζ (Σ⁻¹ − (Σ⁻¹r)(Σ⁻¹r)ᵀ)
            let gc = &mut out.d_covs[l];
            let joint_term = &p.joint_prec - &pr * pr.transpose();
            *gc -= joint_term * (0.5 * weight * zj[l]);
            let state_term = &p.state_prec - &prs * prs.transpose();
            let mut block = gc.view_mut((0, 0), (n, n));
            block += state_term * (0.5 * weight * zs[l]);

            out.d_weights[l] += weight * (zj[l] - zs[l]) / self.weights[l];
        }
        Ok(())
    }
}

/// Responsibilities `(ζ_joint, ζ_state)` of every component at `(s, a)`.
pub fn responsibilities(gmm: &Gmm, split: &BlockSplit, s: &Vector, a: &Vector) -> Result<(Vec<f64>, Vec<f64>)> {
    ScoreModel::new(gmm, split)?.responsibilities(s, a)
}

/// `R_t = Σ_{t' ≥ t} γ^{t'−t} r_{t'}`.
pub fn reward_to_go(traj: &Trajectory, gamma: f64) -> Vec<f64> {
    discounted_tail(&traj.rewards(), gamma)
}

fn discounted_tail(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Replaces every reward by `r_t − β log π(a_t|s_t)`.
pub fn entropy_augment(batch: &RolloutBatch, gmm: &Gmm, split: &BlockSplit) -> Result<RolloutBatch> {
    if batch.beta == 0.0 {
        return Ok(batch.clone());
    }
    let cond = Conditioner::new(gmm, split)?;
    let mut out = batch.clone();
    for traj in &mut out.trajectories {
        for st in &mut traj.steps {
            st.reward -= batch.beta * cond.log_prob(&st.state, &st.action)?;
        }
    }
    Ok(out)
}

/// Monte-Carlo average over trajectories of `Σ_t score_t · (R_t − b_t)`.
/// Rewards are used as given (augment them first for the entropy term).
pub fn euclidean_grads(
    batch: &RolloutBatch,
    gmm: &Gmm,
    split: &BlockSplit,
    baseline: Baseline,
) -> Result<EuclideanGrads> {
    advantage_grads(batch, gmm, split, baseline, false)
}

/// [`euclidean_grads`], optionally dividing the advantages `R_t − b_t` by
/// their batch standard deviation so the estimate does not scale with the
/// reward magnitude or the horizon.
pub fn advantage_grads(
    batch: &RolloutBatch,
    gmm: &Gmm,
    split: &BlockSplit,
    baseline: Baseline,
    normalize: bool,
) -> Result<EuclideanGrads> {
    if batch.is_empty() {
        return Err(Error::Input("rollout batch is empty".into()));
    }
    let model = ScoreModel::new(gmm, split)?;
    let returns: Vec<Vec<f64>> = batch.trajectories.iter().map(|t| reward_to_go(t, batch.gamma)).collect();
    let offsets = baseline_values(&returns, baseline);
    let advantages: Vec<Vec<f64>> = returns
        .iter()
        .map(|r| r.iter().enumerate().map(|(t, v)| v - offsets[t]).collect())
        .collect();
    let scale = if normalize {
        let count: usize = advantages.iter().map(Vec::len).sum();
        let mean = advantages.iter().flatten().sum::<f64>() / count as f64;
        let var = advantages.iter().flatten().map(|a| (a - mean) * (a - mean)).sum::<f64>() / count as f64;
        if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 }
    } else {
        1.0
    };
    let mut total = EuclideanGrads::zeros(gmm.n(), gmm.dim());
    // Per-trajectory sums are reduced in episode order.
    for (traj, adv) in batch.trajectories.iter().zip(&advantages) {
        let mut acc = EuclideanGrads::zeros(gmm.n(), gmm.dim());
        for (st, a) in traj.steps.iter().zip(adv) {
            let w = a * scale;
            if w != 0.0 {
                model.add_score(&st.state, &st.action, w, &mut acc)?;
            }
        }
        total.add_scaled(&acc, 1.0);
    }
    total.scale(1.0 / batch.len() as f64);
    total.d_covs = total.d_covs.iter().map(symmetrize).collect();
    Ok(total)
}

fn baseline_values(returns: &[Vec<f64>], baseline: Baseline) -> Vec<f64> {
    let horizon = returns.iter().map(Vec::len).max().unwrap_or(0).max(1);
    match baseline {
        Baseline::None => vec![0.0; horizon],
        Baseline::BatchMean => {
            let count: usize = returns.iter().map(Vec::len).sum();
            let sum: f64 = returns.iter().flatten().sum();
            vec![sum / count.max(1) as f64; horizon]
        }
        Baseline::TimeIndexed => (0..horizon)
            .map(|t| {
                let vals: Vec<f64> = returns.iter().filter_map(|r| r.get(t).cloned()).collect();
                if vals.is_empty() {
                    0.0
                } else {
                    vals.iter().sum::<f64>() / vals.len() as f64
                }
            })
            .collect(),
    }
}

/// Mean-parameter gradient (no baseline).
pub fn grad_mu(batch: &RolloutBatch, gmm: &Gmm, split: &BlockSplit) -> Result<Vec<Vector>> {
    Ok(euclidean_grads(batch, gmm, split, Baseline::None)?.d_means)
}

/// Covariance gradient (no baseline), exactly symmetric.
pub fn grad_sigma(batch: &RolloutBatch, gmm: &Gmm, split: &BlockSplit) -> Result<Vec<Matrix>> {
    Ok(euclidean_grads(batch, gmm, split, Baseline::None)?.d_covs)
}

/// Weight gradient (no baseline).
pub fn grad_omega(batch: &RolloutBatch, gmm: &Gmm, split: &BlockSplit) -> Result<Vector> {
    Ok(euclidean_grads(batch, gmm, split, Baseline::None)?.d_weights)
}

/// Pulls a weight gradient back through `ω = softmax(η)`:
/// `∂/∂η_j = ω_j (g_j − Σ_k ω_k g_k)`.
pub fn chain_to_eta(d_weights: &Vector, weights: &Vector) -> Result<Vector> {
    if d_weights.len() != weights.len() {
        return Err(Error::Dimension { expected: weights.len(), got: d_weights.len() });
    }
    let mean = weights.dot(d_weights);
    Ok(weights.component_mul(&d_weights.add_scalar(-mean)))
}

/// `softmax(η)`.
pub fn softmax(eta: &Vector) -> Vector {
    Vector::from_vec(softmax_log(eta.as_slice()))
}

/// `log ω`, a valid softmax preimage of the weights.
pub fn weights_to_eta(weights: &Vector) -> Vector {
    weights.map(|w| w.max(f64::MIN_POSITIVE).ln())
}

/// Sample estimate of `J(π)`: mean over trajectories of
/// `Σ_t γᵗ (r_t − β log π(a_t|s_t))`.
pub fn free_energy_estimate(batch: &RolloutBatch, gmm: &Gmm, split: &BlockSplit) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Input("rollout batch is empty".into()));
    }
    let cond = if batch.beta > 0.0 { Some(Conditioner::new(gmm, split)?) } else { None };
    let mut total = 0.0;
    for traj in &batch.trajectories {
        let mut disc = 1.0;
        let mut sum = 0.0;
        for st in &traj.steps {
            let mut r = st.reward;
            if let Some(c) = &cond {
                r -= batch.beta * c.log_prob(&st.state, &st.action)?;
            }
            sum += disc * r;
            disc *= batch.gamma;
        }
        total += sum;
    }
    Ok(total / batch.len() as f64)
}

/// `log π(a|s)` straight from joint and marginal densities; used by tests
/// as an independent route to the conditional.
pub fn log_conditional_by_ratio(gmm: &Gmm, split: &BlockSplit, s: &Vector, a: &Vector) -> Result<f64> {
    let x = split.join(s, a)?;
    let n = split.state_dim;
    let mut joint = Vec::with_capacity(gmm.n());
    let mut state = Vec::with_capacity(gmm.n());
    for (c, w) in gmm.components().iter().zip(gmm.weights().iter()) {
        let lw = w.ln();
        let sg = Gaussian::new(c.mean().rows(0, n).into_owned(), c.cov().view((0, 0), (n, n)).into_owned())?;
        joint.push(lw + c.logpdf(&x)?);
        state.push(lw + sg.logpdf(s)?);
    }
    Ok(log_sum_exp(&joint) - log_sum_exp(&state))
}

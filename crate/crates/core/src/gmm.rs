//! Gaussians and Gaussian mixtures: densities, sampling, EM fitting,
//! marginalization and Gaussian mixture regression (conditioning a joint
//! state-action mixture on the state).
//!
//! All values are immutable after construction. Covariances are stored
//! exactly symmetric together with their Cholesky factor; when the factor
//! does not exist a small diagonal jitter (`1e-9·tr(Σ)/d`, escalated if
//! needed) is added before giving up.

use std::f64::consts::PI;

use nalgebra::{Cholesky, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    asymmetry, cholesky_with_jitter, is_square, log_sum_exp, max_abs, softmax_log, symmetrize,
    Matrix, Vector,
};

/// Asymmetry tolerated (relative) on input covariances before they are
/// symmetrized. Anything larger is a caller bug.
const SYMMETRY_SLACK: f64 = 1e-6;

/// Weight sums within this distance of one are taken as-is.
const SIMPLEX_EXACT: f64 = 1e-12;
/// Weight sums within this distance of one are renormalized.
const SIMPLEX_LOOSE: f64 = 1e-6;

/// Relative ridge on fitted covariances.
const COV_RIDGE: f64 = 1e-6;

/// Responsibility mass below which an EM component is re-seeded.
const DEGENERATE_MASS: f64 = 1.0;

/// Multivariate normal distribution with a full covariance.
#[derive(Debug, Clone)]
pub struct Gaussian {
    mean: Vector,
    cov: Matrix,
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
}

impl Gaussian {
    pub fn new(mean: Vector, cov: Matrix) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::Input("Gaussian needs dimension ≥ 1".into()));
        }
        if !is_square(&cov) || cov.nrows() != d {
            return Err(Error::Dimension { expected: d, got: cov.nrows() });
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite Gaussian parameter".into()));
        }
        if asymmetry(&cov) > SYMMETRY_SLACK * (1.0 + max_abs(&cov)) {
            return Err(Error::Input("covariance is not symmetric".into()));
        }
        let cov = symmetrize(&cov);
        let (chol, cov) = cholesky_with_jitter(&cov)?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self { mean, cov, chol, log_det })
    }

    /// Standard normal in `d` dimensions.
    pub fn standard(d: usize) -> Result<Self> {
        Self::new(Vector::zeros(d), Matrix::identity(d, d))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &Vector {
        &self.mean
    }

    pub fn cov(&self) -> &Matrix {
        &self.cov
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn cholesky(&self) -> &Cholesky<f64, Dyn> {
        &self.chol
    }

    /// Lower Cholesky factor `L` with `Σ = L Lᵀ`.
    pub fn chol_factor(&self) -> Matrix {
        self.chol.l()
    }

    pub fn precision(&self) -> Matrix {
        symmetrize(&self.chol.inverse())
    }

    /// `Σ⁻¹ v`.
    pub fn solve(&self, v: &Vector) -> Vector {
        self.chol.solve(v)
    }

    pub fn with_mean(&self, mean: Vector) -> Result<Self> {
        if mean.len() != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), got: mean.len() });
        }
        Ok(Self { mean, ..self.clone() })
    }

    pub fn logpdf(&self, x: &Vector) -> Result<f64> {
        let d = self.dim();
        if x.len() != d {
            return Err(Error::Dimension { expected: d, got: x.len() });
        }
        let diff = x - &self.mean;
        let z = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&diff)
            .ok_or(Error::NotPositiveDefinite)?;
        let quad = z.norm_squared();
        Ok(-0.5 * (d as f64 * (2.0 * PI).ln() + self.log_det + quad))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        let z = Vector::from_iterator(self.dim(), (0..self.dim()).map(|_| rng.sample(StandardNormal)));
        &self.mean + self.chol.l_dirty().lower_triangle() * z
    }

    /// Restriction to the index range `[start, start + len)`.
    fn block(&self, start: usize, len: usize) -> Result<Self> {
        Self::new(
            self.mean.rows(start, len).into_owned(),
            self.cov.view((start, start), (len, len)).into_owned(),
        )
    }
}

/// Partition of a joint vector into `[state | action]` blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSplit {
    pub state_dim: usize,
    pub action_dim: usize,
}

impl BlockSplit {
    pub fn new(state_dim: usize, action_dim: usize) -> Result<Self> {
        if state_dim == 0 || action_dim == 0 {
            return Err(Error::Input("state and action blocks must be non-empty".into()));
        }
        Ok(Self { state_dim, action_dim })
    }

    pub fn dim(&self) -> usize {
        self.state_dim + self.action_dim
    }

    /// Concatenates a state and an action into a joint vector.
    pub fn join(&self, s: &Vector, a: &Vector) -> Result<Vector> {
        if s.len() != self.state_dim {
            return Err(Error::Dimension { expected: self.state_dim, got: s.len() });
        }
        if a.len() != self.action_dim {
            return Err(Error::Dimension { expected: self.action_dim, got: a.len() });
        }
        Ok(Vector::from_iterator(self.dim(), s.iter().chain(a.iter()).cloned()))
    }

    fn check(&self, d: usize) -> Result<()> {
        if self.dim() != d {
            return Err(Error::Dimension { expected: d, got: self.dim() });
        }
        Ok(())
    }
}

/// Finite mixture of Gaussians with simplex weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "GmmDocument", into = "GmmDocument")]
pub struct Gmm {
    weights: Vector,
    components: Vec<Gaussian>,
}

impl Gmm {
    pub fn new(weights: Vector, components: Vec<Gaussian>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Input("mixture needs at least one component".into()));
        }
        if weights.len() != components.len() {
            return Err(Error::Dimension { expected: components.len(), got: weights.len() });
        }
        let d = components[0].dim();
        if let Some(c) = components.iter().find(|c| c.dim() != d) {
            return Err(Error::Dimension { expected: d, got: c.dim() });
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Input("mixture weights must be finite and non-negative".into()));
        }
        let sum = weights.sum();
        let weights = if (sum - 1.0).abs() <= SIMPLEX_EXACT {
            weights
        } else if (sum - 1.0).abs() <= SIMPLEX_LOOSE {
            weights / sum
        } else {
            return Err(Error::Input(format!("mixture weights sum to {sum}, not 1")));
        };
        Ok(Self { weights, components })
    }

    pub fn single(g: Gaussian) -> Self {
        Self { weights: Vector::from_element(1, 1.0), components: vec![g] }
    }

    /// Number of components.
    pub fn n(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn weights(&self) -> &Vector {
        &self.weights
    }

    pub fn components(&self) -> &[Gaussian] {
        &self.components
    }

    pub fn component(&self, i: usize) -> &Gaussian {
        &self.components[i]
    }

    pub fn with_weights(&self, weights: Vector) -> Result<Self> {
        Self::new(weights, self.components.clone())
    }

    pub fn with_components(&self, components: Vec<Gaussian>) -> Result<Self> {
        Self::new(self.weights.clone(), components)
    }

    pub fn logpdf(&self, x: &Vector) -> Result<f64> {
        gmm_logpdf(x, self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&GmmDocument::from(self.clone())).expect("mixture serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Input(format!("mixture JSON: {e}")))
    }
}

/// On-disk layout of a mixture. Covariances are row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmmDocument {
    pub d: usize,
    pub n: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covs: Vec<Vec<Vec<f64>>>,
}

impl From<Gmm> for GmmDocument {
    fn from(g: Gmm) -> Self {
        let d = g.dim();
        GmmDocument {
            d,
            n: g.n(),
            weights: g.weights.iter().cloned().collect(),
            means: g.components.iter().map(|c| c.mean.iter().cloned().collect()).collect(),
            covs: g
                .components
                .iter()
                .map(|c| (0..d).map(|i| (0..d).map(|j| c.cov[(i, j)]).collect()).collect())
                .collect(),
        }
    }
}

impl TryFrom<GmmDocument> for Gmm {
    type Error = Error;

    fn try_from(doc: GmmDocument) -> Result<Self> {
        if doc.weights.len() != doc.n || doc.means.len() != doc.n || doc.covs.len() != doc.n {
            return Err(Error::Input("mixture document: component count mismatch".into()));
        }
        let mut components = Vec::with_capacity(doc.n);
        for (mean, cov) in doc.means.iter().zip(&doc.covs) {
            if mean.len() != doc.d || cov.len() != doc.d || cov.iter().any(|r| r.len() != doc.d) {
                return Err(Error::Input("mixture document: dimension mismatch".into()));
            }
            let flat: Vec<f64> = cov.iter().flatten().cloned().collect();
            components.push(Gaussian::new(
                Vector::from_vec(mean.clone()),
                Matrix::from_row_slice(doc.d, doc.d, &flat),
            )?);
        }
        Gmm::new(Vector::from_vec(doc.weights), components)
    }
}

pub fn gaussian_logpdf(x: &Vector, g: &Gaussian) -> Result<f64> {
    g.logpdf(x)
}

/// `log Σᵢ ωᵢ N(x; μᵢ, Σᵢ)` by log-sum-exp.
pub fn gmm_logpdf(x: &Vector, gmm: &Gmm) -> Result<f64> {
    let terms = component_log_terms(x, gmm)?;
    Ok(log_sum_exp(&terms))
}

/// `log ωᵢ + log N(x; μᵢ, Σᵢ)` for every component.
pub(crate) fn component_log_terms(x: &Vector, gmm: &Gmm) -> Result<Vec<f64>> {
    gmm.components
        .iter()
        .zip(gmm.weights.iter())
        .map(|(c, &w)| Ok(if w > 0.0 { w.ln() + c.logpdf(x)? } else { f64::NEG_INFINITY }))
        .collect()
}

/// Index drawn from a categorical distribution.
pub(crate) fn sample_categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last_positive = i;
        }
        acc += w;
        if u < acc {
            return i;
        }
    }
    last_positive
}

pub fn gmm_sample<R: Rng + ?Sized>(gmm: &Gmm, rng: &mut R) -> Vector {
    let k = sample_categorical(gmm.weights.as_slice(), rng);
    gmm.components[k].sample(rng)
}

/// State marginal of a joint mixture: same weights, components restricted
/// to the state block.
pub fn marginal(gmm: &Gmm, split: &BlockSplit) -> Result<Gmm> {
    split.check(gmm.dim())?;
    let components = gmm
        .components
        .iter()
        .map(|c| c.block(0, split.state_dim))
        .collect::<Result<Vec<_>>>()?;
    Gmm::new(gmm.weights.clone(), components)
}

/// Conditional action mixture `π(a | s)` of a joint state-action mixture.
pub fn gmr_condition(gmm: &Gmm, split: &BlockSplit, s: &Vector) -> Result<Gmm> {
    Conditioner::new(gmm, split)?.condition(s)
}

#[derive(Debug, Clone)]
struct ConditionalComponent {
    state: Gaussian,
    /// `Σᵃˢ (Σˢ)⁻¹`.
    gain: Matrix,
    /// Conditional covariance with the unconditioned action mean.
    action: Gaussian,
}

/// Gaussian mixture regression with the per-component state factorizations
/// and regression gains precomputed, for repeated conditioning on many
/// states.
#[derive(Debug, Clone)]
pub struct Conditioner {
    split: BlockSplit,
    log_weights: Vec<f64>,
    parts: Vec<ConditionalComponent>,
}

impl Conditioner {
    pub fn new(gmm: &Gmm, split: &BlockSplit) -> Result<Self> {
        split.check(gmm.dim())?;
        let (n, m) = (split.state_dim, split.action_dim);
        let parts = gmm
            .components
            .iter()
            .map(|c| {
                let state = c.block(0, n)?;
                let cov_sa = c.cov.view((0, n), (n, m)).into_owned();
                let cov_aa = c.cov.view((n, n), (m, m)).into_owned();
                // gainᵀ = (Σˢ)⁻¹ Σˢᵃ
                let gain = state.cholesky().solve(&cov_sa).transpose();
                let cond_cov = symmetrize(&(cov_aa - &gain * cov_sa));
                let action = Gaussian::new(c.mean.rows(n, m).into_owned(), cond_cov)?;
                Ok(ConditionalComponent { state, gain, action })
            })
            .collect::<Result<Vec<_>>>()?;
        let log_weights = gmm
            .weights
            .iter()
            .map(|&w| if w > 0.0 { w.ln() } else { f64::NEG_INFINITY })
            .collect();
        Ok(Self { split: *split, log_weights, parts })
    }

    pub fn split(&self) -> &BlockSplit {
        &self.split
    }

    fn check_state(&self, s: &Vector) -> Result<()> {
        if s.len() != self.split.state_dim {
            return Err(Error::Dimension { expected: self.split.state_dim, got: s.len() });
        }
        Ok(())
    }

    /// State-dependent mixture weights `ωᵢ(s)`.
    pub fn weights_at(&self, s: &Vector) -> Result<Vec<f64>> {
        self.check_state(s)?;
        let log_w = self
            .parts
            .iter()
            .zip(&self.log_weights)
            .map(|(p, &lw)| Ok(if lw.is_finite() { lw + p.state.logpdf(s)? } else { lw }))
            .collect::<Result<Vec<_>>>()?;
        Ok(softmax_log(&log_w))
    }

    fn mean_at(&self, i: usize, s: &Vector) -> Vector {
        let p = &self.parts[i];
        p.action.mean() + &p.gain * (s - p.state.mean())
    }

    pub fn condition(&self, s: &Vector) -> Result<Gmm> {
        let weights = self.weights_at(s)?;
        let components = (0..self.parts.len())
            .map(|i| self.parts[i].action.with_mean(self.mean_at(i, s)))
            .collect::<Result<Vec<_>>>()?;
        Gmm::new(Vector::from_vec(weights), components)
    }

    /// `log π(a | s)`.
    pub fn log_prob(&self, s: &Vector, a: &Vector) -> Result<f64> {
        if a.len() != self.split.action_dim {
            return Err(Error::Dimension { expected: self.split.action_dim, got: a.len() });
        }
        let weights = self.weights_at(s)?;
        let mut terms = Vec::with_capacity(self.parts.len());
        for (i, w) in weights.iter().enumerate() {
            if *w <= 0.0 {
                continue;
            }
            let p = &self.parts[i];
            // N(a; μᵃ + K(s − μˢ), Σ) = N(a − K(s − μˢ); μᵃ, Σ)
            let shifted = a - &p.gain * (s - p.state.mean());
            terms.push(w.ln() + p.action.logpdf(&shifted)?);
        }
        Ok(log_sum_exp(&terms))
    }

    pub fn sample<R: Rng + ?Sized>(&self, s: &Vector, rng: &mut R) -> Result<Vector> {
        let weights = self.weights_at(s)?;
        let k = sample_categorical(&weights, rng);
        let p = &self.parts[k];
        let m = self.split.action_dim;
        let z = Vector::from_iterator(m, (0..m).map(|_| rng.sample(StandardNormal)));
        Ok(self.mean_at(k, s) + p.action.cholesky().l_dirty().lower_triangle() * z)
    }
}

/// Result of an EM fit with its log-likelihood trace.
#[derive(Debug, Clone)]
pub struct EmReport {
    pub gmm: Gmm,
    /// Mean per-point log-likelihood after each E-step.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub reseeded: usize,
}

/// Maximum-likelihood mixture fit by expectation-maximization.
pub fn em_fit<R: Rng + ?Sized>(
    data: &[Vector],
    n_components: usize,
    rng: &mut R,
    max_iters: usize,
    tol: f64,
) -> Result<Gmm> {
    em_fit_traced(data, n_components, rng, max_iters, tol).map(|r| r.gmm)
}

pub fn em_fit_traced<R: Rng + ?Sized>(
    data: &[Vector],
    n_components: usize,
    rng: &mut R,
    max_iters: usize,
    tol: f64,
) -> Result<EmReport> {
    if data.is_empty() {
        return Err(Error::Input("EM needs data".into()));
    }
    if n_components == 0 {
        return Err(Error::Input("EM needs at least one component".into()));
    }
    if data.len() < n_components {
        return Err(Error::Input(format!(
            "{} data points cannot support {} components",
            data.len(),
            n_components
        )));
    }
    let d = data[0].len();
    if d == 0 {
        return Err(Error::Input("data dimension must be ≥ 1".into()));
    }
    if let Some(x) = data.iter().find(|x| x.len() != d) {
        return Err(Error::Dimension { expected: d, got: x.len() });
    }
    if data.iter().any(|x| x.iter().any(|v| !v.is_finite())) {
        return Err(Error::Input("data contains non-finite values".into()));
    }

    let n = data.len();
    let (_, data_cov) = weighted_moments(data, &vec![1.0; n]);
    let shared = cholesky_with_jitter(&data_cov).map(|(_, c)| c)?;
    // Ridge added to every fitted covariance so a component sitting on
    // repeated points stays positive definite.
    let ridge = COV_RIDGE * shared.trace() / d as f64;

    let scale = shared.diagonal().map(f64::sqrt);
    let centers = kmeans_pp(data, n_components, &scale, rng);
    let mut gmm = Gmm::new(
        Vector::from_element(n_components, 1.0 / n_components as f64),
        centers
            .into_iter()
            .map(|c| Gaussian::new(c, shared.clone()))
            .collect::<Result<Vec<_>>>()?,
    )?;

    let mut trace = Vec::new();
    let mut reseeded = 0;
    let mut converged = false;
    let mut resp = vec![vec![0.0; n_components]; n];
    let mut iterations = 0;
    loop {
        // E-step
        let mut total = 0.0;
        for (x, r) in data.iter().zip(resp.iter_mut()) {
            let terms = component_log_terms(x, &gmm)?;
            let lse = log_sum_exp(&terms);
            if !lse.is_finite() {
                return Err(Error::Numeric("EM likelihood underflowed".into()));
            }
            total += lse;
            for (rk, t) in r.iter_mut().zip(&terms) {
                *rk = (t - lse).exp();
            }
        }
        let ll = total / n as f64;
        if let Some(&prev) = trace.last() {
            if ll - prev < tol {
                converged = true;
                trace.push(ll);
                break;
            }
        }
        trace.push(ll);
        if iterations >= max_iters {
            break;
        }
        iterations += 1;

        // M-step
        let mut weights = Vec::with_capacity(n_components);
        let mut components = Vec::with_capacity(n_components);
        for k in 0..n_components {
            let rk: Vec<f64> = resp.iter().map(|r| r[k]).collect();
            let mass: f64 = rk.iter().sum();
            if mass < DEGENERATE_MASS {
                let pick = rng.random_range(0..n);
                weights.push(1.0 / n_components as f64);
                components.push(Gaussian::new(data[pick].clone(), shared.clone())?);
                reseeded += 1;
                continue;
            }
            let (mu, mut cov) = weighted_moments(data, &rk);
            for i in 0..d {
                cov[(i, i)] += ridge;
            }
            weights.push(mass / n as f64);
            components.push(Gaussian::new(mu, cov)?);
        }
        let total_w: f64 = weights.iter().sum();
        gmm = Gmm::new(Vector::from_iterator(n_components, weights.iter().map(|w| w / total_w)), components)?;
    }
    Ok(EmReport { gmm, log_likelihood: trace, iterations, converged, reseeded })
}

/// Weighted mean and (biased) covariance.
fn weighted_moments(data: &[Vector], w: &[f64]) -> (Vector, Matrix) {
    let d = data[0].len();
    let total: f64 = w.iter().sum();
    let mut mean = Vector::zeros(d);
    for (x, &wi) in data.iter().zip(w) {
        mean.axpy(wi, x, 1.0);
    }
    mean /= total;
    let mut cov = Matrix::zeros(d, d);
    for (x, &wi) in data.iter().zip(w) {
        let diff = x - &mean;
        cov.ger(wi, &diff, &diff, 1.0);
    }
    cov /= total;
    (mean, symmetrize(&cov))
}

/// k-means++ seeding: first center uniform, the rest drawn proportionally
/// to the squared distance to the nearest chosen center.
/// Distances are measured in coordinates divided by `scale`.
fn kmeans_pp<R: Rng + ?Sized>(data: &[Vector], k: usize, scale: &Vector, rng: &mut R) -> Vec<Vector> {
    let n = data.len();
    let dist = |x: &Vector, c: &Vector| (x - c).component_div(scale).norm_squared();
    let mut centers = vec![data[rng.random_range(0..n)].clone()];
    let mut dist2: Vec<f64> = data.iter().map(|x| dist(x, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist2.iter().sum();
        let next = if total > 0.0 {
            let probs: Vec<f64> = dist2.iter().map(|v| v / total).collect();
            sample_categorical(&probs, rng)
        } else {
            rng.random_range(0..n)
        };
        let c = data[next].clone();
        for (dv, x) in dist2.iter_mut().zip(data) {
            *dv = dv.min(dist(x, &c));
        }
        centers.push(c);
    }
    centers
}

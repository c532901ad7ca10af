//! Bures-Wasserstein geometry of Gaussian parameters.
//!
//! A Gaussian `N(μ, Σ)` is a point of `ℝᵈ × S₊₊ᵈ`. The mean factor is flat,
//! so mean updates are plain vector addition. On the covariance factor the
//! Riemannian gradient of a function with Euclidean gradient `G` is
//! `4·sym(G Σ)` and the retraction is
//!
//! ```text
//! R_Σ(X) = Σ + X + L Σ L,   where   L Σ + Σ L = X,
//! ```
//!
//! which equals `(I + L) Σ (I + L)`: positive definite unless `I + L` is
//! singular, exactly `Σ` at `X = 0`, and with derivative `X` at the origin.
//!
//! Matrix functions go through the symmetric eigendecomposition; dimensions
//! here are tiny, so exactness beats iterative schemes.

use crate::error::{Error, Result};
use crate::gmm::Gaussian;
use crate::linalg::{asymmetry, cholesky_with_jitter, eigen_map, max_abs, sym_eigen, symmetrize, Matrix, Vector};

/// Asymmetry accepted on construction (relative to the entries).
const SYMMETRY_TOL: f64 = 1e-12;

/// Largest negative round-off in a squared W₂ that is silently clamped,
/// relative to the covariance traces.
const W2_NEGATIVE_SLACK: f64 = 1e-9;

/// Symmetric positive definite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix(Matrix);

impl SpdMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(Error::Dimension { expected: m.nrows(), got: m.ncols() });
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite matrix entry".into()));
        }
        if asymmetry(&m) > SYMMETRY_TOL * (1.0 + max_abs(&m)) {
            return Err(Error::Input("matrix is not symmetric".into()));
        }
        let m = symmetrize(&m);
        if nalgebra::Cholesky::new(m.clone()).is_none() {
            return Err(Error::NotPositiveDefinite);
        }
        Ok(Self(m))
    }

    pub fn identity(d: usize) -> Self {
        Self(Matrix::identity(d, d))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_inner(self) -> Matrix {
        self.0
    }

    /// Smallest eigenvalue.
    pub fn min_eigenvalue(&self) -> f64 {
        sym_eigen(&self.0).eigenvalues.min()
    }
}

/// Tangent element of the product manifold `(ℝᵈ × S₊₊ᵈ)ᴺ`: one mean
/// direction and one symmetric covariance direction per component.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentUpdate {
    pub d_means: Vec<Vector>,
    pub d_covs: Vec<Matrix>,
}

impl TangentUpdate {
    pub fn new(d_means: Vec<Vector>, d_covs: Vec<Matrix>) -> Result<Self> {
        if d_means.len() != d_covs.len() {
            return Err(Error::Dimension { expected: d_means.len(), got: d_covs.len() });
        }
        Ok(Self { d_means, d_covs: d_covs.iter().map(symmetrize).collect() })
    }

    pub fn zeros(n: usize, d: usize) -> Self {
        Self { d_means: vec![Vector::zeros(d); n], d_covs: vec![Matrix::zeros(d, d); n] }
    }

    pub fn len(&self) -> usize {
        self.d_means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_means.is_empty()
    }

    pub fn scaled(&self, t: f64) -> Self {
        Self {
            d_means: self.d_means.iter().map(|v| v * t).collect(),
            d_covs: self.d_covs.iter().map(|m| m * t).collect(),
        }
    }

    /// Euclidean norm over all blocks.
    pub fn norm(&self) -> f64 {
        let sq: f64 = self.d_means.iter().map(|v| v.norm_squared()).sum::<f64>()
            + self.d_covs.iter().map(|m| m.norm_squared()).sum::<f64>();
        sq.sqrt()
    }
}

/// Principal square root of an SPD matrix.
pub fn spd_sqrt(a: &SpdMatrix) -> Result<SpdMatrix> {
    let eig = sym_eigen(a.as_matrix());
    if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
        return Err(Error::NotPositiveDefinite);
    }
    Ok(SpdMatrix(eigen_map(&eig, f64::sqrt)))
}

/// Square root of a symmetric positive semidefinite matrix; eigenvalues
/// that round-off pushed slightly negative are clamped to zero.
fn psd_sqrt(a: &Matrix) -> Result<Matrix> {
    let eig = sym_eigen(a);
    let scale = eig.eigenvalues.iter().fold(0.0_f64, |m, l| m.max(l.abs())).max(1.0);
    if eig.eigenvalues.iter().any(|&l| l < -1e-10 * scale) {
        return Err(Error::Numeric("matrix expected to be positive semidefinite".into()));
    }
    Ok(eigen_map(&eig, |l| l.max(0.0).sqrt()))
}

/// Solves the Lyapunov equation `L A + A L = B` for symmetric `L`.
pub fn lyap_solve(a: &SpdMatrix, b: &Matrix) -> Result<Matrix> {
    let d = a.dim();
    if b.nrows() != d || b.ncols() != d {
        return Err(Error::Dimension { expected: d, got: b.nrows() });
    }
    let eig = sym_eigen(a.as_matrix());
    if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
        return Err(Error::NotPositiveDefinite);
    }
    let u = &eig.eigenvectors;
    let lam = &eig.eigenvalues;
    let mut rotated = u.transpose() * symmetrize(b) * u;
    for i in 0..d {
        for j in 0..d {
            rotated[(i, j)] /= lam[i] + lam[j];
        }
    }
    Ok(symmetrize(&(u * rotated * u.transpose())))
}

/// Squared 2-Wasserstein distance between two Gaussians,
/// `‖μ₁ − μ₂‖² + tr(Σ₁ + Σ₂ − 2 (Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2})`.
pub fn w2_gaussian_sq(g1: &Gaussian, g2: &Gaussian) -> Result<f64> {
    if g1.dim() != g2.dim() {
        return Err(Error::Dimension { expected: g1.dim(), got: g2.dim() });
    }
    let root1 = psd_sqrt(g1.cov())?;
    w2_with_root(g1, &root1, g2)
}

/// Same as [`w2_gaussian_sq`] with `Σ₁^{1/2}` supplied.
pub(crate) fn w2_with_root(g1: &Gaussian, root1: &Matrix, g2: &Gaussian) -> Result<f64> {
    let mean_term = (g1.mean() - g2.mean()).norm_squared();
    let cross = symmetrize(&(root1 * g2.cov() * root1));
    let cross_root = psd_sqrt(&cross)?;
    let traces = g1.cov().trace() + g2.cov().trace();
    let value = mean_term + traces - 2.0 * cross_root.trace();
    // Clipping tiny negative eigenvalues in the square root costs up to
    // sqrt(eps * scale) per eigenvalue.
    let scale = 1.0 + traces;
    let slack = W2_NEGATIVE_SLACK * scale + 2.0 * g1.dim() as f64 * (f64::EPSILON * scale).sqrt();
    if value < -slack {
        return Err(Error::Numeric(format!("squared W2 came out negative: {value:e}")));
    }
    Ok(value.max(0.0))
}

/// Square root of a Gaussian's covariance, for repeated W₂ evaluations.
pub(crate) fn cov_root(g: &Gaussian) -> Result<Matrix> {
    psd_sqrt(g.cov())
}

/// Riemannian gradient on the covariance factor: `4·sym(G Σ)`.
pub fn bw_grad(egrad_cov: &Matrix, sigma: &SpdMatrix) -> Matrix {
    let gs = egrad_cov * sigma.as_matrix();
    symmetrize(&gs) * 4.0
}

/// Retraction `R_Σ(X) = Σ + X + L Σ L` with `L Σ + Σ L = X`.
///
/// Fails with [`Error::StepTooLarge`] when the result is not positive
/// definite even after the jitter floor.
pub fn bw_retract(sigma: &SpdMatrix, x: &Matrix) -> Result<SpdMatrix> {
    let d = sigma.dim();
    if x.nrows() != d || x.ncols() != d {
        return Err(Error::Dimension { expected: d, got: x.nrows() });
    }
    let l = lyap_solve(sigma, x)?;
    let s = sigma.as_matrix();
    let out = symmetrize(&(s + symmetrize(x) + &l * s * &l));
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::StepTooLarge);
    }
    match cholesky_with_jitter(&out) {
        Ok((_, m)) => Ok(SpdMatrix(m)),
        Err(_) => Err(Error::StepTooLarge),
    }
}

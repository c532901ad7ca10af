//! Small dense linear-algebra helpers shared by the numerical modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Number of escalations of the covariance jitter before giving up.
const JITTER_ATTEMPTS: usize = 8;

/// `(A + Aᵀ) / 2`.
pub fn symmetrize(a: &Matrix) -> Matrix {
    (a + a.transpose()) * 0.5
}

pub fn max_abs(a: &Matrix) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Largest absolute asymmetry `max |A − Aᵀ|`.
pub fn asymmetry(a: &Matrix) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

pub fn is_square(a: &Matrix) -> bool {
    a.nrows() == a.ncols()
}

/// Symmetric eigendecomposition `A = U diag(λ) Uᵀ` of the symmetrized input.
pub fn sym_eigen(a: &Matrix) -> SymmetricEigen<f64, Dyn> {
    SymmetricEigen::new(symmetrize(a))
}

/// Rebuilds `U diag(f(λ)) Uᵀ`.
pub fn eigen_map(eig: &SymmetricEigen<f64, Dyn>, f: impl Fn(f64) -> f64) -> Matrix {
    let u = &eig.eigenvectors;
    let mapped = Vector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|&l| f(l)));
    let scaled = u * Matrix::from_diagonal(&mapped);
    symmetrize(&(scaled * u.transpose()))
}

/// Cholesky factorization, retrying with a growing diagonal jitter
/// `ε·I`, `ε = 1e-9·tr(A)/d`, whenever the plain factorization fails.
///
/// Returns the factor together with the (possibly jittered) matrix it
/// factors.
pub fn cholesky_with_jitter(a: &Matrix) -> Result<(Cholesky<f64, Dyn>, Matrix)> {
    if let Some(ch) = Cholesky::new(a.clone()) {
        return Ok((ch, a.clone()));
    }
    let d = a.nrows().max(1) as f64;
    let trace = a.trace();
    if !trace.is_finite() || trace <= 0.0 {
        return Err(Error::NotPositiveDefinite);
    }
    let mut eps = 1e-9 * trace / d;
    for _ in 0..JITTER_ATTEMPTS {
        let mut jittered = a.clone();
        for i in 0..a.nrows() {
            jittered[(i, i)] += eps;
        }
        if let Some(ch) = Cholesky::new(jittered.clone()) {
            return Ok((ch, jittered));
        }
        eps *= 10.0;
    }
    Err(Error::NotPositiveDefinite)
}

/// `log Σ exp(vᵢ)` without overflow; `−∞` for an empty or all-`−∞` input.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Normalizes log-weights into a probability vector.
pub fn softmax_log(log_w: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(log_w);
    if !lse.is_finite() {
        let n = log_w.len().max(1) as f64;
        return vec![1.0 / n; log_w.len()];
    }
    log_w.iter().map(|v| (v - lse).exp()).collect()
}

/// Inverse of an SPD matrix through its Cholesky factor.
pub fn spd_inverse(ch: &Cholesky<f64, Dyn>) -> Matrix {
    symmetrize(&ch.inverse())
}

/// Sum with Neumaier compensation.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub fn frobenius(a: &Matrix) -> f64 {
    a.norm()
}

// Independent reference computations shared by the integration tests.
// Nothing here calls into the library's numerics.
#![allow(dead_code)]

use gmmflow::linalg::{Matrix, Vector};
use gmmflow::{Gaussian, Gmm};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec<R: Rng>(d: usize, rng: &mut R) -> Vector {
    Vector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(rng)))
}

/// `A Aᵀ / d + floor·I` with Gaussian `A`.
pub fn random_spd<R: Rng>(d: usize, floor: f64, rng: &mut R) -> Matrix {
    let a = Matrix::from_iterator(d, d, (0..d * d).map(|_| StandardNormal.sample(rng)));
    (&a * a.transpose()) / d as f64 + Matrix::identity(d, d) * floor
}

pub fn random_sym<R: Rng>(d: usize, rng: &mut R) -> Matrix {
    let a = Matrix::from_iterator(d, d, (0..d * d).map(|_| StandardNormal.sample(rng)));
    (&a + a.transpose()) * 0.5
}

pub fn random_gaussian<R: Rng>(d: usize, rng: &mut R) -> Gaussian {
    Gaussian::new(normal_vec(d, rng), random_spd(d, 0.3, rng)).unwrap()
}

pub fn random_weights<R: Rng>(n: usize, rng: &mut R) -> Vector {
    let raw = Vector::from_iterator(n, (0..n).map(|_| rng.random_range(0.2..1.0)));
    let s = raw.sum();
    raw / s
}

pub fn random_gmm<R: Rng>(n: usize, d: usize, rng: &mut R) -> Gmm {
    let comps = (0..n).map(|_| random_gaussian(d, rng)).collect();
    Gmm::new(random_weights(n, rng), comps).unwrap()
}

/// Log density of `N(mean, cov)` through an LU solve and determinant.
pub fn log_normal(x: &Vector, mean: &Vector, cov: &Matrix) -> f64 {
    let d = x.len() as f64;
    let r = x - mean;
    let lu = cov.clone().lu();
    let sol = lu.solve(&r).expect("invertible covariance");
    -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + lu.determinant().ln() + r.dot(&sol))
}

/// `log Σ wᵢ N(x; μᵢ, Σᵢ)` for raw (not necessarily normalized) weights.
pub fn log_mixture(x: &Vector, weights: &[f64], means: &[Vector], covs: &[Matrix]) -> f64 {
    let terms: Vec<f64> = (0..weights.len())
        .map(|i| weights[i].ln() + log_normal(x, &means[i], &covs[i]))
        .collect();
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// `log π(a | s)` of a joint mixture as joint over state marginal, from raw
/// parameters. `ns` is the state dimension.
pub fn log_conditional(
    s: &Vector,
    a: &Vector,
    ns: usize,
    weights: &[f64],
    means: &[Vector],
    covs: &[Matrix],
) -> f64 {
    let x = Vector::from_iterator(s.len() + a.len(), s.iter().chain(a.iter()).cloned());
    let ms: Vec<Vector> = means.iter().map(|m| m.rows(0, ns).into_owned()).collect();
    let cs: Vec<Matrix> = covs.iter().map(|c| c.view((0, 0), (ns, ns)).into_owned()).collect();
    log_mixture(&x, weights, means, covs) - log_mixture(s, weights, &ms, &cs)
}

/// Solves `L A + A L = B` by vectorization: `(I ⊗ A + Aᵀ ⊗ I) vec(L) = vec(B)`.
pub fn lyap_kronecker(a: &Matrix, b: &Matrix) -> Matrix {
    let d = a.nrows();
    let eye = Matrix::identity(d, d);
    let k = eye.kronecker(a) + a.transpose().kronecker(&eye);
    let vec_b = Vector::from_column_slice(b.as_slice());
    let sol = k.lu().solve(&vec_b).expect("nonsingular Kronecker system");
    Matrix::from_column_slice(d, d, sol.as_slice())
}

/// Principal square root by the Denman-Beavers iteration.
pub fn sqrt_denman_beavers(a: &Matrix) -> Matrix {
    let d = a.nrows();
    let mut y = a.clone();
    let mut z = Matrix::identity(d, d);
    for _ in 0..100 {
        let yi = y.clone().try_inverse().expect("invertible iterate");
        let zi = z.clone().try_inverse().expect("invertible iterate");
        let y_next = (&y + zi) * 0.5;
        z = (&z + yi) * 0.5;
        let change = (&y_next - &y).norm();
        y = y_next;
        if change < 1e-15 * y.norm() {
            break;
        }
    }
    y
}

/// Exact discrete OT by enumerating every basis of the transportation
/// polytope. Only for tiny instances.
pub fn ot_by_enumeration(w1: &[f64], w2: &[f64], cost: &Matrix) -> f64 {
    let (m, n) = (w1.len(), w2.len());
    let cells: Vec<(usize, usize)> = (0..m).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    let k = m + n - 1;
    let mut rhs = Vector::zeros(m + n);
    for i in 0..m {
        rhs[i] = w1[i];
    }
    for j in 0..n {
        rhs[m + j] = w2[j];
    }
    let mut best = f64::INFINITY;
    let mut pick: Vec<usize> = (0..k).collect();
    loop {
        let mut a = Matrix::zeros(m + n, k);
        for (col, &c) in pick.iter().enumerate() {
            let (i, j) = cells[c];
            a[(i, col)] = 1.0;
            a[(m + j, col)] = 1.0;
        }
        // Least squares through the normal equations; skip singular bases.
        let ata = a.transpose() * &a;
        if let Some(inv) = ata.try_inverse() {
            let x = inv * a.transpose() * &rhs;
            let residual = (&a * &x - &rhs).norm();
            if residual < 1e-10 && x.iter().all(|&v| v >= -1e-12) {
                let c: f64 = pick.iter().zip(x.iter()).map(|(&c, &v)| cost[cells[c]] * v).sum();
                best = best.min(c);
            }
        }
        // Next k-subset in lexicographic order.
        let total = cells.len();
        let Some(i) = (0..k).rev().find(|&i| pick[i] < total - k + i) else {
            return best;
        };
        pick[i] += 1;
        for j in i + 1..k {
            pick[j] = pick[j - 1] + 1;
        }
    }
}

/// Relative error `‖x − y‖ / max(‖y‖, floor)`.
pub fn rel_err(x: &[f64], y: &[f64], floor: f64) -> f64 {
    let diff: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let norm: f64 = y.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / norm.max(floor)
}

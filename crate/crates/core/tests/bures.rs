mod common;

use common::*;
use gmmflow::bures::{bw_grad, bw_retract, lyap_solve, spd_sqrt, w2_gaussian_sq};
use gmmflow::linalg::{Matrix, Vector};
use gmmflow::{Gaussian, SpdMatrix};
use proptest::prelude::*;
use rand::Rng;

fn g1d(mu: f64, sigma: f64) -> Gaussian {
    Gaussian::new(Vector::from_element(1, mu), Matrix::from_element(1, 1, sigma * sigma)).unwrap()
}

#[test]
fn one_dimensional_closed_form() {
    let mut r = rng(1);
    for _ in 0..200 {
        let (m1, m2) = (r.random_range(-5.0..5.0), r.random_range(-5.0..5.0));
        let (s1, s2) = (r.random_range(0.1..3.0), r.random_range(0.1..3.0));
        let want = (m1 - m2) * (m1 - m2) + (s1 - s2) * (s1 - s2);
        let got = w2_gaussian_sq(&g1d(m1, s1), &g1d(m2, s2)).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn equal_covariances_leave_the_mean_term() {
    let mut r = rng(2);
    for d in 1..=5 {
        let cov = random_spd(d, 0.2, &mut r);
        let (a, b) = (normal_vec(d, &mut r), normal_vec(d, &mut r));
        let got = w2_gaussian_sq(&Gaussian::new(a.clone(), cov.clone()).unwrap(), &Gaussian::new(b.clone(), cov).unwrap())
            .unwrap();
        assert!((got - (a - b).norm_squared()).abs() < 1e-12);
    }
}

#[test]
fn commuting_covariances_use_root_differences() {
    // Diagonal covariances: W₂² = ‖Δμ‖² + Σ (√aᵢ − √bᵢ)².
    let a: [f64; 3] = [0.5, 2.0, 4.0];
    let b: [f64; 3] = [1.5, 0.25, 9.0];
    let g = |v: &[f64; 3]| Gaussian::new(Vector::zeros(3), Matrix::from_diagonal(&Vector::from_row_slice(v))).unwrap();
    let want: f64 = a.iter().zip(&b).map(|(x, y)| (x.sqrt() - y.sqrt()).powi(2)).sum();
    assert!((w2_gaussian_sq(&g(&a), &g(&b)).unwrap() - want).abs() < 1e-12);
}

#[test]
fn lyapunov_matches_kronecker_system() {
    let mut r = rng(3);
    for d in 1..=6 {
        let a = random_spd(d, 0.1, &mut r);
        let b = random_sym(d, &mut r);
        let got = lyap_solve(&SpdMatrix::new(a.clone()).unwrap(), &b).unwrap();
        let want = lyap_kronecker(&a, &b);
        assert!((&got - &want).norm() < 1e-9 * (1.0 + want.norm()), "d = {d}");
    }
}

#[test]
fn square_root_matches_denman_beavers() {
    let mut r = rng(4);
    for d in 1..=6 {
        let a = random_spd(d, 0.05, &mut r);
        let got = spd_sqrt(&SpdMatrix::new(a.clone()).unwrap()).unwrap().into_inner();
        let want = sqrt_denman_beavers(&a);
        assert!((&got - &want).norm() < 1e-10 * (1.0 + want.norm()), "d = {d}");
    }
}

#[test]
fn riemannian_gradient_formula() {
    let mut r = rng(5);
    let s = random_spd(3, 0.5, &mut r);
    let g = random_sym(3, &mut r);
    let want = (&g * &s + &s * &g) * 2.0;
    assert!((bw_grad(&g, &SpdMatrix::new(s).unwrap()) - want).norm() < 1e-12);
}

#[test]
fn retraction_integrity() {
    let mut r = rng(6);
    for trial in 0..1000 {
        let d = 1 + trial % 6;
        let sigma = SpdMatrix::new(random_spd(d, 0.05, &mut r)).unwrap();
        let mut x = random_sym(d, &mut r);
        let bound = 0.5 * sigma.min_eigenvalue();
        let scale = r.random_range(0.0..1.0) * bound / x.norm().max(1e-300);
        x *= scale;
        let out = bw_retract(&sigma, &x).unwrap();
        let m = out.as_matrix();
        assert_eq!(m, &m.transpose());
        assert!(nalgebra::Cholesky::new(m.clone()).is_some());
        let zero = bw_retract(&sigma, &Matrix::zeros(d, d)).unwrap();
        assert_eq!(zero.as_matrix(), sigma.as_matrix());
    }
}

#[test]
fn retraction_is_first_order_consistent() {
    let mut r = rng(7);
    for d in [2, 4, 6] {
        let sigma = SpdMatrix::new(random_spd(d, 0.2, &mut r)).unwrap();
        let x = random_sym(d, &mut r);
        let ts = [1e-2, 1e-3, 1e-4];
        let errs: Vec<f64> = ts
            .iter()
            .map(|&t| {
                let out = bw_retract(&sigma, &(&x * t)).unwrap();
                ((out.as_matrix() - sigma.as_matrix()) / t - &x).norm()
            })
            .collect();
        for k in 0..2 {
            let slope = (errs[k].ln() - errs[k + 1].ln()) / (ts[k].ln() - ts[k + 1].ln());
            assert!((slope - 1.0).abs() < 0.1, "d = {d}, slope {slope}");
        }
    }
}

fn w2(a: &Gaussian, b: &Gaussian) -> f64 {
    w2_gaussian_sq(a, b).unwrap().sqrt()
}

fn gaussian_strategy(d: usize) -> impl Strategy<Value = Gaussian> {
    (
        proptest::collection::vec(-3.0..3.0f64, d),
        proptest::collection::vec(-1.0..1.0f64, d * d),
        0.05..1.0f64,
    )
        .prop_map(move |(mean, a, floor)| {
            let a = Matrix::from_row_slice(d, d, &a);
            let cov = &a * a.transpose() + Matrix::identity(d, d) * floor;
            Gaussian::new(Vector::from_vec(mean), cov).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn w2_is_symmetric(a in gaussian_strategy(3), b in gaussian_strategy(3)) {
        let (ab, ba) = (w2_gaussian_sq(&a, &b).unwrap(), w2_gaussian_sq(&b, &a).unwrap());
        prop_assert!((ab - ba).abs() <= 1e-9 * (1.0 + ab));
    }

    #[test]
    fn w2_satisfies_triangle_inequality(
        a in gaussian_strategy(3),
        b in gaussian_strategy(3),
        c in gaussian_strategy(3),
    ) {
        prop_assert!(w2(&a, &c) <= w2(&a, &b) + w2(&b, &c) + 1e-9);
    }

    #[test]
    fn w2_vanishes_on_the_diagonal(a in gaussian_strategy(4)) {
        prop_assert!(w2_gaussian_sq(&a, &a).unwrap() < 1e-9);
    }
}

mod common;

use common::*;
use gmmflow::gmm::{em_fit, em_fit_traced, gmm_logpdf, gmm_sample, gmr_condition, marginal, Conditioner};
use gmmflow::linalg::{Matrix, Vector};
use gmmflow::{BlockSplit, Error, Gaussian, Gmm};
use proptest::prelude::*;

fn raw_parts(g: &Gmm) -> (Vec<f64>, Vec<Vector>, Vec<Matrix>) {
    (
        g.weights().iter().cloned().collect(),
        g.components().iter().map(|c| c.mean().clone()).collect(),
        g.components().iter().map(|c| c.cov().clone()).collect(),
    )
}

#[test]
fn conditional_density_is_joint_over_marginal_on_a_grid() {
    let mut r = rng(20);
    let split = BlockSplit::new(2, 2).unwrap();
    for _ in 0..5 {
        let g = random_gmm(3, 4, &mut r);
        let cond = Conditioner::new(&g, &split).unwrap();
        let (w, m, c) = raw_parts(&g);
        for i in 0..7 {
            for j in 0..7 {
                let s = Vector::from_row_slice(&[-1.5 + 0.5 * i as f64, -1.5 + 0.5 * j as f64]);
                let a = normal_vec(2, &mut r);
                let want = log_conditional(&s, &a, 2, &w, &m, &c);
                let got = cond.log_prob(&s, &a).unwrap();
                // Relative density error: |exp(got − want) − 1|.
                assert!((got - want).exp_m1().abs() <= 1e-9, "{got} vs {want}");
                let via_gmm = gmm_logpdf(&a, &gmr_condition(&g, &split, &s).unwrap()).unwrap();
                assert!((via_gmm - want).exp_m1().abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn conditional_weights_form_a_simplex() {
    let mut r = rng(21);
    let split = BlockSplit::new(2, 1).unwrap();
    let g = random_gmm(4, 3, &mut r);
    let cond = Conditioner::new(&g, &split).unwrap();
    for k in 0..200 {
        // Includes states far in the tails, where naive weights underflow.
        let s = normal_vec(2, &mut r) * (1.0 + k as f64 / 10.0);
        let w = cond.weights_at(&s).unwrap();
        assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn conditional_moments_follow_the_regression_formulas() {
    // One component: the conditional is a single Gaussian with the Schur
    // complement covariance.
    let mut r = rng(22);
    let g = random_gaussian(3, &mut r);
    let split = BlockSplit::new(1, 2).unwrap();
    let s = Vector::from_element(1, 0.7);
    let out = gmr_condition(&Gmm::single(g.clone()), &split, &s).unwrap();
    let (mu, cov) = (g.mean(), g.cov());
    let sss = cov[(0, 0)];
    let sas = cov.view((1, 0), (2, 1)).into_owned();
    let want_mean = mu.rows(1, 2) + &sas * ((0.7 - mu[0]) / sss);
    let want_cov = cov.view((1, 1), (2, 2)) - &sas * sas.transpose() / sss;
    assert!((out.component(0).mean() - want_mean).norm() < 1e-12);
    assert!((out.component(0).cov() - want_cov).norm() < 1e-12);
}

#[test]
fn marginal_keeps_weights_and_state_blocks() {
    let mut r = rng(23);
    let g = random_gmm(3, 4, &mut r);
    let m = marginal(&g, &BlockSplit::new(3, 1).unwrap()).unwrap();
    assert_eq!(m.weights(), g.weights());
    for (a, b) in m.components().iter().zip(g.components()) {
        assert_eq!(a.mean(), &b.mean().rows(0, 3).into_owned());
        assert_eq!(a.cov(), &b.cov().view((0, 0), (3, 3)).into_owned());
    }
}

#[test]
fn em_log_likelihood_never_decreases() {
    let mut r = rng(24);
    let truth = random_gmm(3, 2, &mut r);
    let data: Vec<Vector> = (0..400).map(|_| gmm_sample(&truth, &mut r)).collect();
    let report = em_fit_traced(&data, 3, &mut r, 200, 0.0).unwrap();
    for w in report.log_likelihood.windows(2) {
        assert!(w[1] >= w[0] - 1e-10, "{} then {}", w[0], w[1]);
    }
}

#[test]
fn em_recovers_separated_clusters() {
    let mut r = rng(25);
    let centers = [[-6.0, 0.0], [0.0, 6.0], [6.0, 0.0]];
    let comps = centers
        .iter()
        .map(|c| Gaussian::new(Vector::from_row_slice(c), Matrix::identity(2, 2) * 0.5).unwrap())
        .collect();
    let truth = Gmm::new(Vector::from_row_slice(&[0.2, 0.3, 0.5]), comps).unwrap();
    let data: Vec<Vector> = (0..3000).map(|_| gmm_sample(&truth, &mut r)).collect();
    let fit = em_fit(&data, 3, &mut r, 300, 1e-9).unwrap();
    for (c, w) in centers.iter().zip([0.2, 0.3, 0.5]) {
        let target = Vector::from_row_slice(c);
        let k = (0..3)
            .min_by(|&a, &b| {
                (fit.component(a).mean() - &target).norm().total_cmp(&(fit.component(b).mean() - &target).norm())
            })
            .unwrap();
        assert!((fit.component(k).mean() - &target).norm() < 0.15);
        assert!((fit.weights()[k] - w).abs() < 0.03);
    }
}

#[test]
fn em_survives_duplicate_points() {
    let mut r = rng(26);
    let mut data = vec![Vector::from_row_slice(&[1.0, 1.0]); 50];
    data.extend((0..50).map(|_| normal_vec(2, &mut r)));
    let fit = em_fit(&data, 3, &mut r, 100, 1e-8).unwrap();
    assert_eq!(fit.n(), 3);
}

#[test]
fn em_rejects_more_components_than_points() {
    let data = vec![Vector::zeros(2); 3];
    assert!(matches!(em_fit(&data, 4, &mut rng(27), 10, 1e-6), Err(Error::Input(_))));
}

#[test]
fn sample_moments_match_the_mixture() {
    let mut r = rng(28);
    let g = random_gmm(2, 2, &mut r);
    let n = 40_000;
    let xs: Vec<Vector> = (0..n).map(|_| gmm_sample(&g, &mut r)).collect();
    let mean = xs.iter().fold(Vector::zeros(2), |acc, x| acc + x) / n as f64;
    let want = g.components().iter().zip(g.weights().iter()).fold(Vector::zeros(2), |acc, (c, w)| acc + c.mean() * *w);
    assert!((mean - want).norm() < 0.05);
}

#[test]
fn json_round_trip_is_exact() {
    let mut r = rng(29);
    let g = random_gmm(4, 3, &mut r);
    let back = Gmm::from_json(&g.to_json()).unwrap();
    assert_eq!(raw_parts(&back), raw_parts(&g));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conditional_density_integrates_to_one_in_1d(seed in 0u64..1000, s in -2.0..2.0f64) {
        let g = random_gmm(3, 2, &mut rng(seed));
        let cond = Conditioner::new(&g, &BlockSplit::new(1, 1).unwrap()).unwrap();
        let s = Vector::from_element(1, s);
        // Midpoint rule over a wide interval.
        let (lo, hi, cells) = (-40.0, 40.0, 8000);
        let h = (hi - lo) / cells as f64;
        let total: f64 = (0..cells)
            .map(|k| cond.log_prob(&s, &Vector::from_element(1, lo + (k as f64 + 0.5) * h)).unwrap().exp() * h)
            .sum();
        prop_assert!((total - 1.0).abs() < 1e-6, "{}", total);
    }
}

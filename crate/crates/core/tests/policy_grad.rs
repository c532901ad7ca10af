mod common;

use common::*;
use gmmflow::gmm::{gmr_condition, Conditioner};
use gmmflow::linalg::{Matrix, Vector};
use gmmflow::policy_grad::{
    advantage_grads, chain_to_eta, entropy_augment, euclidean_grads, free_energy_estimate, log_conditional_by_ratio,
    reward_to_go, softmax, weights_to_eta, Baseline, ScoreModel,
};
use gmmflow::{BlockSplit, DoneReason, Gaussian, Gmm, RolloutBatch, Step, Trajectory};
use proptest::prelude::*;
use rand::Rng;

/// Score cores against central differences of an independently computed
/// `log π(a|s)` over raw mixture parameters.
fn score_errors(seed: u64) -> (f64, f64, f64) {
    let mut r = rng(seed);
    let split = BlockSplit::new(2, 2).unwrap();
    let g = random_gmm(3, 4, &mut r);
    let x = gmmflow::gmm::gmm_sample(&g, &mut r);
    let (s, a) = (x.rows(0, 2).into_owned(), x.rows(2, 2).into_owned());
    let score = ScoreModel::new(&g, &split).unwrap().score(&s, &a).unwrap();

    let w: Vec<f64> = g.weights().iter().cloned().collect();
    let m: Vec<Vector> = g.components().iter().map(|c| c.mean().clone()).collect();
    let c: Vec<Matrix> = g.components().iter().map(|c| c.cov().clone()).collect();
    let f = |w: &[f64], m: &[Vector], c: &[Matrix]| log_conditional(&s, &a, 2, w, m, c);
    let h = 1e-5;

    let (mut fd_m, mut an_m) = (vec![], vec![]);
    let (mut fd_c, mut an_c) = (vec![], vec![]);
    let (mut fd_w, mut an_w) = (vec![], vec![]);
    for l in 0..3 {
        for i in 0..4 {
            let (mut up, mut dn) = (m.clone(), m.clone());
            up[l][i] += h;
            dn[l][i] -= h;
            fd_m.push((f(&w, &up, &c) - f(&w, &dn, &c)) / (2.0 * h));
            an_m.push(score.d_means[l][i]);
        }
        for i in 0..4 {
            for j in i..4 {
                let (mut up, mut dn) = (c.clone(), c.clone());
                for (mat, sign) in [(&mut up, 1.0), (&mut dn, -1.0)] {
                    mat[l][(i, j)] += sign * h;
                    if i != j {
                        mat[l][(j, i)] += sign * h;
                    }
                }
                fd_c.push((f(&w, &m, &up) - f(&w, &m, &dn)) / (2.0 * h));
                let factor = if i == j { 1.0 } else { 2.0 };
                an_c.push(factor * score.d_covs[l][(i, j)]);
            }
        }
        let (mut up, mut dn) = (w.clone(), w.clone());
        up[l] += h;
        dn[l] -= h;
        fd_w.push((f(&up, &m, &c) - f(&dn, &m, &c)) / (2.0 * h));
        an_w.push(score.d_weights[l]);
    }
    (rel_err(&an_m, &fd_m, 1e-8), rel_err(&an_c, &fd_c, 1e-8), rel_err(&an_w, &fd_w, 1e-8))
}

#[test]
fn score_matches_finite_differences() {
    for seed in 0..100 {
        let (em, ec, ew) = score_errors(seed);
        assert!(em <= 1e-5, "seed {seed}: means {em}");
        assert!(ec <= 1e-4, "seed {seed}: covariances {ec}");
        assert!(ew <= 1e-4, "seed {seed}: weights {ew}");
    }
}

#[test]
fn ratio_route_agrees_with_regression() {
    let mut r = rng(30);
    let split = BlockSplit::new(2, 1).unwrap();
    let g = random_gmm(3, 3, &mut r);
    let cond = Conditioner::new(&g, &split).unwrap();
    for _ in 0..50 {
        let (s, a) = (normal_vec(2, &mut r), normal_vec(1, &mut r));
        let x = log_conditional_by_ratio(&g, &split, &s, &a).unwrap();
        assert!((x - cond.log_prob(&s, &a).unwrap()).abs() < 1e-10);
    }
}

fn traj(rewards: &[f64]) -> Trajectory {
    let steps = rewards
        .iter()
        .map(|&r| Step { state: Vector::zeros(1), action: Vector::zeros(1), reward: r })
        .collect();
    Trajectory::new(steps, DoneReason::Horizon).unwrap()
}

#[test]
fn reward_to_go_by_double_sum() {
    let mut r = rng(31);
    let rewards: Vec<f64> = (0..25).map(|_| r.random_range(-1.0..1.0)).collect();
    for gamma in [1.0, 0.99, 0.5] {
        let got = reward_to_go(&traj(&rewards), gamma);
        for (t, g) in got.iter().enumerate() {
            let want: f64 = (t..rewards.len()).map(|k| gamma.powi((k - t) as i32) * rewards[k]).sum();
            assert!((g - want).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_chain_rule_matches_finite_differences() {
    let mut r = rng(32);
    for _ in 0..20 {
        let eta = normal_vec(5, &mut r);
        let coef = normal_vec(5, &mut r);
        // f(ω) = Σ c_k sin(ω_k), ∇f = c ∘ cos(ω).
        let f = |e: &Vector| softmax(e).iter().zip(coef.iter()).map(|(w, c)| c * w.sin()).sum::<f64>();
        let w = softmax(&eta);
        let grad = coef.component_mul(&w.map(f64::cos));
        let chain = chain_to_eta(&grad, &w).unwrap();
        let h = 1e-6;
        let fd: Vec<f64> = (0..5)
            .map(|k| {
                let (mut up, mut dn) = (eta.clone(), eta.clone());
                up[k] += h;
                dn[k] -= h;
                (f(&up) - f(&dn)) / (2.0 * h)
            })
            .collect();
        assert!(rel_err(chain.as_slice(), &fd, 1e-8) < 1e-6);
    }
}

/// One-step bandit at a fixed state with reward equal to the first action
/// coordinate, so `J` is the first coordinate of the conditional mean.
fn bandit_batch(g: &Gmm, split: &BlockSplit, s: &Vector, n: usize, seed: u64) -> RolloutBatch {
    let cond = Conditioner::new(g, split).unwrap();
    let mut r = rng(seed);
    let trajectories = (0..n)
        .map(|_| {
            let a = cond.sample(s, &mut r).unwrap();
            let step = Step { state: s.clone(), action: a.clone(), reward: a[0] };
            Trajectory::new(vec![step], DoneReason::Horizon).unwrap()
        })
        .collect();
    RolloutBatch::new(trajectories, 1.0, 0.0).unwrap()
}

fn bandit_value(g: &Gmm, split: &BlockSplit, s: &Vector) -> f64 {
    let c = gmr_condition(g, split, s).unwrap();
    c.components().iter().zip(c.weights().iter()).map(|(k, w)| w * k.mean()[0]).sum()
}

#[test]
fn policy_gradient_estimate_is_unbiased() {
    let mut r = rng(33);
    let split = BlockSplit::new(1, 1).unwrap();
    let g = random_gmm(2, 2, &mut r);
    let s = Vector::from_element(1, 0.3);
    let batch = bandit_batch(&g, &split, &s, 200_000, 34);
    let est = euclidean_grads(&batch, &g, &split, Baseline::BatchMean).unwrap();
    let h = 1e-6;
    for l in 0..2 {
        for i in 0..2 {
            let shift = |d: f64| {
                let comps: Vec<Gaussian> = g
                    .components()
                    .iter()
                    .enumerate()
                    .map(|(k, c)| {
                        let mut m = c.mean().clone();
                        if k == l {
                            m[i] += d;
                        }
                        c.with_mean(m).unwrap()
                    })
                    .collect();
                bandit_value(&g.with_components(comps).unwrap(), &split, &s)
            };
            let fd = (shift(h) - shift(-h)) / (2.0 * h);
            let got = est.d_means[l][i];
            assert!((got - fd).abs() < 0.02 + 0.05 * fd.abs(), "component {l}, coordinate {i}: {got} vs {fd}");
        }
    }
}

#[test]
fn baselines_do_not_move_the_mean_estimate_much() {
    let mut r = rng(35);
    let split = BlockSplit::new(1, 1).unwrap();
    let g = random_gmm(2, 2, &mut r);
    let s = Vector::from_element(1, -0.2);
    let batch = bandit_batch(&g, &split, &s, 100_000, 36);
    let plain = euclidean_grads(&batch, &g, &split, Baseline::None).unwrap();
    let based = euclidean_grads(&batch, &g, &split, Baseline::TimeIndexed).unwrap();
    for l in 0..2 {
        assert!((&plain.d_means[l] - &based.d_means[l]).norm() < 0.05 * (1.0 + plain.d_means[l].norm()));
    }
}

#[test]
fn normalized_advantages_only_rescale() {
    let mut r = rng(37);
    let split = BlockSplit::new(1, 1).unwrap();
    let g = random_gmm(2, 2, &mut r);
    let batch = bandit_batch(&g, &split, &Vector::from_element(1, 0.1), 500, 38);
    let raw = advantage_grads(&batch, &g, &split, Baseline::BatchMean, false).unwrap();
    let norm = advantage_grads(&batch, &g, &split, Baseline::BatchMean, true).unwrap();
    let ratio = norm.d_weights[0] / raw.d_weights[0];
    assert!(ratio > 0.0);
    assert!((&norm.d_weights - &raw.d_weights * ratio).norm() < 1e-9 * (1.0 + norm.d_weights.norm()));
}

#[test]
fn entropy_term_matches_gaussian_closed_form() {
    // Single joint Gaussian: the conditional is N(·, Σ_c) at every state and
    // E[−log π] = ½ log det(2πe Σ_c).
    let mut r = rng(39);
    let g = Gmm::single(random_gaussian(3, &mut r));
    let split = BlockSplit::new(1, 2).unwrap();
    let s = Vector::from_element(1, 0.4);
    let cond = gmr_condition(&g, &split, &s).unwrap();
    let cov = cond.component(0).cov();
    let want = 0.5 * (cov * (2.0 * std::f64::consts::PI * std::f64::consts::E)).determinant().ln();
    let mut batch = bandit_batch(&g, &split, &s, 100_000, 40);
    batch.trajectories.iter_mut().for_each(|t| t.steps[0].reward = 0.0);
    batch.beta = 1.0;
    let got = free_energy_estimate(&batch, &g, &split).unwrap();
    assert!((got - want).abs() < 0.02, "{got} vs {want}");
    let augmented = entropy_augment(&batch, &g, &split).unwrap();
    let mut plain = augmented.clone();
    plain.beta = 0.0;
    assert!((free_energy_estimate(&plain, &g, &split).unwrap() - got).abs() < 1e-12);
}

#[test]
fn discounting_in_the_objective() {
    let batch = RolloutBatch::new(vec![traj(&[1.0, 1.0, 1.0]), traj(&[2.0])], 0.5, 0.0).unwrap();
    let g = Gmm::single(Gaussian::standard(2).unwrap());
    let j = free_energy_estimate(&batch, &g, &BlockSplit::new(1, 1).unwrap()).unwrap();
    assert!((j - (1.75 + 2.0) / 2.0).abs() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn softmax_inverts_weights_to_eta(raw in proptest::collection::vec(0.01..1.0f64, 1..8)) {
        let s: f64 = raw.iter().sum();
        let w = Vector::from_vec(raw.iter().map(|x| x / s).collect());
        let back = softmax(&weights_to_eta(&w));
        prop_assert!((back - &w).abs().max() < 1e-14);
    }

    #[test]
    fn chain_to_eta_is_orthogonal_to_the_shift(
        raw in proptest::collection::vec(0.01..1.0f64, 2..8),
        g in proptest::collection::vec(-5.0..5.0f64, 8),
    ) {
        // Softmax ignores a common shift of η, so the pulled-back gradient
        // sums to zero.
        let s: f64 = raw.iter().sum();
        let w = Vector::from_vec(raw.iter().map(|x| x / s).collect());
        let grad = Vector::from_row_slice(&g[..w.len()]);
        prop_assert!(chain_to_eta(&grad, &w).unwrap().sum().abs() < 1e-12);
    }

    #[test]
    fn responsibilities_are_distributions(seed in 0u64..500) {
        let mut r = rng(seed);
        let g = random_gmm(4, 3, &mut r);
        let (s, a) = (normal_vec(2, &mut r), normal_vec(1, &mut r));
        let (zj, zs) = ScoreModel::new(&g, &BlockSplit::new(2, 1).unwrap()).unwrap().responsibilities(&s, &a).unwrap();
        prop_assert!((zj.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!((zs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

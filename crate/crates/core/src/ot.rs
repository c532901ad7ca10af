//! Discrete optimal transport between Gaussian mixtures.
//!
//! The mixture distance used throughout is the discrete OT problem whose
//! ground cost is the closed-form W₂² between components:
//!
//! ```text
//! W²(π₁, π₂) = min_{P ∈ U(ω₁, ω₂)} Σᵢⱼ Pᵢⱼ W₂²(N₁ᵢ, N₂ⱼ)
//! ```
//!
//! It is solved either by log-domain Sinkhorn (with geometric annealing of
//! the regularization) or, for small instances, exactly by the
//! transportation simplex. Sinkhorn's first dual potential is the gradient
//! of the distance with respect to the first weight vector.

use serde::{Deserialize, Serialize};

use crate::bures::{cov_root, w2_with_root};
use crate::error::{Error, Result};
use crate::gmm::Gmm;
use crate::linalg::{log_sum_exp, Matrix, Vector};

/// Weights below this value are raised to it before Sinkhorn.
pub const WEIGHT_FLOOR: f64 = 1e-8;

/// Marginal tolerance of the intermediate annealing stages, which only
/// warm-start the next one.
const STAGE_TOL: f64 = 1e-5;

/// Largest `N₁·N₂` accepted by [`exact_ot_lp`].
pub const EXACT_MAX_CELLS: usize = 64;

/// Entropic coupling with its dual potentials.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    /// Coupling, rounded exactly onto the marginals.
    pub plan: Matrix,
    /// Row potential, centered to zero mean.
    pub dual_f: Vector,
    pub dual_g: Vector,
    /// `⟨P, C⟩`.
    pub cost_value: f64,
    pub epsilon: f64,
    pub converged: bool,
    /// L1 violation of the row marginal.
    pub marginal_error: f64,
    pub iterations: usize,
}

/// Geometric ε-annealing: `ε` runs from `start_scale·median(C)` down to
/// `end_scale·median(C)` in `stages` steps, warm-starting the potentials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EntropicSchedule {
    pub start_scale: f64,
    pub end_scale: f64,
    pub stages: usize,
    /// Total Sinkhorn iteration budget over all stages.
    pub max_iters: usize,
    /// Marginal violation (L1) accepted at the final stage.
    pub tol: f64,
}

impl Default for EntropicSchedule {
    fn default() -> Self {
        Self { start_scale: 0.1, end_scale: 1e-3, stages: 8, max_iters: 20_000, tol: 1e-10 }
    }
}

/// Which OT solver evaluates the mixture distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OtSolver {
    Sinkhorn(EntropicSchedule),
    Exact,
    /// Exact when `N₁·N₂ ≤ EXACT_MAX_CELLS`, Sinkhorn otherwise.
    Auto(EntropicSchedule),
}

impl Default for OtSolver {
    fn default() -> Self {
        OtSolver::Auto(EntropicSchedule::default())
    }
}

/// `Cᵢⱼ = W₂²(component i of gmm1, component j of gmm2)`.
pub fn cost_matrix(gmm1: &Gmm, gmm2: &Gmm) -> Result<Matrix> {
    if gmm1.dim() != gmm2.dim() {
        return Err(Error::Dimension { expected: gmm1.dim(), got: gmm2.dim() });
    }
    let mut c = Matrix::zeros(gmm1.n(), gmm2.n());
    for (i, a) in gmm1.components().iter().enumerate() {
        let root = cov_root(a)?;
        for (j, b) in gmm2.components().iter().enumerate() {
            let v = w2_with_root(a, &root, b)?;
            if !v.is_finite() {
                return Err(Error::Numeric(format!("component distance ({i}, {j}) overflowed")));
            }
            c[(i, j)] = v;
        }
    }
    Ok(c)
}

fn check_marginal(w: &Vector, name: &str) -> Result<()> {
    if w.is_empty() {
        return Err(Error::Input(format!("{name} is empty")));
    }
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Input(format!("{name} has negative or non-finite entries")));
    }
    if (w.sum() - 1.0).abs() > 1e-6 {
        return Err(Error::Input(format!("{name} does not sum to one")));
    }
    Ok(())
}

fn check_problem(w1: &Vector, w2: &Vector, cost: &Matrix) -> Result<()> {
    check_marginal(w1, "first marginal")?;
    check_marginal(w2, "second marginal")?;
    if cost.nrows() != w1.len() {
        return Err(Error::Dimension { expected: w1.len(), got: cost.nrows() });
    }
    if cost.ncols() != w2.len() {
        return Err(Error::Dimension { expected: w2.len(), got: cost.ncols() });
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("cost matrix has non-finite entries".into()));
    }
    Ok(())
}

/// Floors the weights at [`WEIGHT_FLOOR`] and renormalizes.
pub fn floor_weights(w: &Vector) -> Vector {
    let floored = w.map(|v| v.max(WEIGHT_FLOOR));
    let s = floored.sum();
    floored / s
}

struct Potentials {
    f: Vector,
    g: Vector,
}

struct SolveOutcome {
    iterations: usize,
    error: f64,
    converged: bool,
}

/// Log-domain Sinkhorn iterations from the given potentials. Leaves the
/// best potentials seen (smallest row violation) in `pot`.
#[allow(clippy::too_many_arguments)]
fn sinkhorn_iterate(
    log_a: &[f64],
    a: &Vector,
    log_b: &[f64],
    cost: &Matrix,
    eps: f64,
    pot: &mut Potentials,
    max_iters: usize,
    tol: f64,
) -> SolveOutcome {
    let (n1, n2) = (cost.nrows(), cost.ncols());
    let mut buf1 = vec![0.0; n2];
    let mut buf2 = vec![0.0; n1];
    let mut best = (f64::INFINITY, pot.f.clone(), pot.g.clone());
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        for i in 0..n1 {
            for j in 0..n2 {
                buf1[j] = (pot.g[j] - cost[(i, j)]) / eps;
            }
            pot.f[i] = eps * (log_a[i] - log_sum_exp(&buf1));
        }
        for j in 0..n2 {
            for i in 0..n1 {
                buf2[i] = (pot.f[i] - cost[(i, j)]) / eps;
            }
            pot.g[j] = eps * (log_b[j] - log_sum_exp(&buf2));
        }
        let err = row_violation(a, cost, pot, eps);
        if err < best.0 {
            best = (err, pot.f.clone(), pot.g.clone());
        }
        if err <= tol {
            break;
        }
    }
    pot.f = best.1;
    pot.g = best.2;
    SolveOutcome { iterations, error: best.0, converged: best.0 <= tol }
}

fn row_violation(a: &Vector, cost: &Matrix, pot: &Potentials, eps: f64) -> f64 {
    let mut err = 0.0;
    for i in 0..cost.nrows() {
        let row: f64 = (0..cost.ncols()).map(|j| ((pot.f[i] + pot.g[j] - cost[(i, j)]) / eps).exp()).sum();
        err += (row - a[i]).abs();
    }
    err
}

/// Projects an approximate plan onto the transport polytope: shrink rows
/// and columns that carry too much mass, then hand the missing mass out as
/// a rank-one correction (Altschuler, Weed and Rigollet, 2017).
fn round_to_marginals(mut plan: Matrix, a: &Vector, b: &Vector) -> Matrix {
    for (i, mut row) in plan.row_iter_mut().enumerate() {
        let s = row.sum();
        if s > a[i] {
            row *= a[i] / s;
        }
    }
    for (j, mut col) in plan.column_iter_mut().enumerate() {
        let s = col.sum();
        if s > b[j] {
            col *= b[j] / s;
        }
    }
    // Both residuals are non-negative up to round-off.
    let err_r = (a - plan.column_sum()).map(|v| v.max(0.0));
    let err_c = (b - plan.row_sum().transpose()).map(|v| v.max(0.0));
    let mass = err_r.sum();
    if mass > 0.0 {
        plan += &err_r * err_c.transpose() / mass;
    }
    plan
}

fn assemble(cost: &Matrix, a: &Vector, b: &Vector, mut pot: Potentials, eps: f64, outcome: SolveOutcome) -> TransportPlan {
    let raw = Matrix::from_fn(cost.nrows(), cost.ncols(), |i, j| {
        ((pot.f[i] + pot.g[j] - cost[(i, j)]) / eps).exp()
    });
    // The potentials and `marginal_error` still describe the raw iterate.
    let plan = round_to_marginals(raw, a, b);
    let cost_value = plan.component_mul(cost).sum();
    let shift = pot.f.mean();
    pot.f.add_scalar_mut(-shift);
    pot.g.add_scalar_mut(shift);
    TransportPlan {
        plan,
        dual_f: pot.f,
        dual_g: pot.g,
        cost_value,
        epsilon: eps,
        converged: outcome.converged,
        marginal_error: outcome.error,
        iterations: outcome.iterations,
    }
}

/// Entropic OT at a fixed regularization `epsilon`, in the log domain.
///
/// Stops once the L1 row-marginal violation drops to `tol`; otherwise the
/// best plan found is returned with `converged = false`.
pub fn sinkhorn(
    w1: &Vector,
    w2: &Vector,
    cost: &Matrix,
    epsilon: f64,
    max_iters: usize,
    tol: f64,
) -> Result<TransportPlan> {
    check_problem(w1, w2, cost)?;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Input("epsilon must be positive".into()));
    }
    let a = floor_weights(w1);
    let b = floor_weights(w2);
    let log_a: Vec<f64> = a.iter().map(|v| v.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|v| v.ln()).collect();
    let mut pot = Potentials { f: Vector::zeros(a.len()), g: Vector::zeros(b.len()) };
    let outcome = sinkhorn_iterate(&log_a, &a, &log_b, cost, epsilon, &mut pot, max_iters.max(1), tol);
    Ok(assemble(cost, &a, &b, pot, epsilon, outcome))
}

/// Reference scale of a cost matrix: its median entry, falling back to the
/// maximum and then to one when the costs vanish.
pub fn cost_scale(cost: &Matrix) -> f64 {
    let mut v: Vec<f64> = cost.iter().cloned().collect();
    v.sort_by(|a, b| a.total_cmp(b));
    let median = if v.len() % 2 == 1 {
        v[v.len() / 2]
    } else {
        0.5 * (v[v.len() / 2 - 1] + v[v.len() / 2])
    };
    if median > 1e-300 {
        median
    } else {
        let max = v.last().cloned().unwrap_or(0.0);
        if max > 1e-300 { max } else { 1.0 }
    }
}

/// The plan after every annealing stage, the last one being the answer.
pub fn sinkhorn_anneal_path(
    w1: &Vector,
    w2: &Vector,
    cost: &Matrix,
    schedule: &EntropicSchedule,
) -> Result<Vec<TransportPlan>> {
    check_problem(w1, w2, cost)?;
    if !(schedule.start_scale > 0.0 && schedule.end_scale > 0.0 && schedule.end_scale <= schedule.start_scale) {
        return Err(Error::Input("annealing scales must satisfy 0 < end ≤ start".into()));
    }
    let a = floor_weights(w1);
    let b = floor_weights(w2);
    let log_a: Vec<f64> = a.iter().map(|v| v.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|v| v.ln()).collect();
    let scale = cost_scale(cost);
    let stages = schedule.stages.max(1);
    let ratio = if stages > 1 {
        (schedule.end_scale / schedule.start_scale).powf(1.0 / (stages - 1) as f64)
    } else {
        1.0
    };
    // Intermediate stages get an even share of half the budget; the final
    // stage gets the rest.
    let per_stage = if stages > 1 { (schedule.max_iters / 2 / (stages - 1)).max(1) } else { 0 };
    let mut pot = Potentials { f: Vector::zeros(a.len()), g: Vector::zeros(b.len()) };
    let mut used = 0;
    let mut path = Vec::with_capacity(stages);
    for k in 0..stages {
        let last = k + 1 == stages;
        let eps = if last {
            schedule.end_scale * scale
        } else {
            schedule.start_scale * scale * ratio.powi(k as i32)
        };
        let (budget, tol) = if last {
            (schedule.max_iters.saturating_sub(used).max(1), schedule.tol)
        } else {
            (per_stage, schedule.tol.max(STAGE_TOL))
        };
        let outcome = sinkhorn_iterate(&log_a, &a, &log_b, cost, eps, &mut pot, budget, tol);
        used += outcome.iterations;
        let snapshot = Potentials { f: pot.f.clone(), g: pot.g.clone() };
        path.push(assemble(cost, &a, &b, snapshot, eps, outcome));
    }
    Ok(path)
}

/// Sinkhorn with the annealed regularization schedule.
pub fn sinkhorn_annealed(
    w1: &Vector,
    w2: &Vector,
    cost: &Matrix,
    schedule: &EntropicSchedule,
) -> Result<TransportPlan> {
    let mut path = sinkhorn_anneal_path(w1, w2, cost, schedule)?;
    Ok(path.pop().expect("at least one stage"))
}

/// Exact optimal coupling with its LP dual variables.
#[derive(Debug, Clone)]
pub struct ExactPlan {
    pub plan: Matrix,
    pub cost: f64,
    pub dual_u: Vector,
    pub dual_v: Vector,
}

/// Exact discrete OT by the transportation simplex (northwest-corner start,
/// MODI pricing, Bland's rule against cycling on degenerate pivots).
pub fn exact_ot_lp(w1: &Vector, w2: &Vector, cost: &Matrix) -> Result<ExactPlan> {
    check_problem(w1, w2, cost)?;
    let (m, n) = (w1.len(), w2.len());
    if m * n > EXACT_MAX_CELLS {
        return Err(Error::TooLarge { cells: m * n, limit: EXACT_MAX_CELLS });
    }
    let supply: Vec<f64> = (w1 / w1.sum()).iter().cloned().collect();
    let demand: Vec<f64> = (w2 / w2.sum()).iter().cloned().collect();

    let mut x = Matrix::zeros(m, n);
    let mut basic = vec![vec![false; n]; m];
    {
        let (mut ra, mut rb) = (supply.clone(), demand.clone());
        let (mut i, mut j) = (0, 0);
        loop {
            let q = ra[i].min(rb[j]);
            x[(i, j)] = q;
            basic[i][j] = true;
            ra[i] -= q;
            rb[j] -= q;
            if i == m - 1 && j == n - 1 {
                break;
            }
            if i == m - 1 {
                j += 1;
            } else if j == n - 1 || ra[i] <= rb[j] {
                i += 1;
            } else {
                j += 1;
            }
        }
    }

    let scale = cost.iter().fold(0.0_f64, |s, v| s.max(v.abs())).max(1e-300);
    let rc_tol = 1e-12 * scale;
    let max_pivots = 50 * m * n + 100;
    let mut u = vec![0.0; m];
    let mut v = vec![0.0; n];
    for _ in 0..max_pivots {
        tree_potentials(&basic, cost, &mut u, &mut v);
        let entering = (0..m)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .find(|&(i, j)| !basic[i][j] && cost[(i, j)] - u[i] - v[j] < -rc_tol);
        let Some((ei, ej)) = entering else {
            let total = x.component_mul(cost).sum();
            return Ok(ExactPlan {
                plan: x.map(|q| q.max(0.0)),
                cost: total,
                dual_u: Vector::from_vec(u),
                dual_v: Vector::from_vec(v),
            });
        };
        // Path in the basis tree from column ej to row ei; nodes are rows
        // 0..m and columns m..m+n, edges are basic cells.
        let path = tree_path(&basic, m + ej, ei, m, n);
        // Signs alternate starting with '−' on the cell touching column ej.
        let theta = path.iter().step_by(2).map(|&(i, j)| x[(i, j)]).fold(f64::INFINITY, f64::min);
        let leaving = path
            .iter()
            .step_by(2)
            .filter(|&&(i, j)| x[(i, j)] == theta)
            .min()
            .cloned()
            .expect("cycle has a decreasing cell");
        x[(ei, ej)] += theta;
        for (k, &(i, j)) in path.iter().enumerate() {
            if k % 2 == 0 {
                x[(i, j)] -= theta;
            } else {
                x[(i, j)] += theta;
            }
        }
        x[leaving] = 0.0;
        basic[leaving.0][leaving.1] = false;
        basic[ei][ej] = true;
    }
    Err(Error::Numeric("transportation simplex exceeded its pivot budget".into()))
}

/// Solves `uᵢ + vⱼ = cᵢⱼ` on the basic cells with `u₀ = 0`.
fn tree_potentials(basic: &[Vec<bool>], cost: &Matrix, u: &mut [f64], v: &mut [f64]) {
    let (m, n) = (u.len(), v.len());
    let mut known_u = vec![false; m];
    let mut known_v = vec![false; n];
    known_u[0] = true;
    u[0] = 0.0;
    let mut queue = vec![(true, 0usize)];
    while let Some((is_row, k)) = queue.pop() {
        if is_row {
            for j in 0..n {
                if basic[k][j] && !known_v[j] {
                    v[j] = cost[(k, j)] - u[k];
                    known_v[j] = true;
                    queue.push((false, j));
                }
            }
        } else {
            for i in 0..m {
                if basic[i][k] && !known_u[i] {
                    u[i] = cost[(i, k)] - v[k];
                    known_u[i] = true;
                    queue.push((true, i));
                }
            }
        }
    }
}

/// Basic cells on the tree path from node `from` to row node `to_row`.
fn tree_path(basic: &[Vec<bool>], from: usize, to_row: usize, m: usize, n: usize) -> Vec<(usize, usize)> {
    let total = m + n;
    let mut parent: Vec<Option<usize>> = vec![None; total];
    let mut seen = vec![false; total];
    seen[from] = true;
    let mut queue = std::collections::VecDeque::from([from]);
    while let Some(node) = queue.pop_front() {
        if node == to_row {
            break;
        }
        let neighbours: Vec<usize> = if node < m {
            (0..n).filter(|&j| basic[node][j]).map(|j| m + j).collect()
        } else {
            (0..m).filter(|&i| basic[i][node - m]).collect()
        };
        for nb in neighbours {
            if !seen[nb] {
                seen[nb] = true;
                parent[nb] = Some(node);
                queue.push_back(nb);
            }
        }
    }
    let mut cells = Vec::new();
    let mut node = to_row;
    while let Some(p) = parent[node] {
        let cell = if node < m { (node, p - m) } else { (p, node - m) };
        cells.push(cell);
        node = p;
    }
    cells.reverse();
    cells
}

/// Squared mixture distance under the chosen solver.
pub fn w2_gmm_sq(gmm1: &Gmm, gmm2: &Gmm, solver: &OtSolver) -> Result<f64> {
    let cost = cost_matrix(gmm1, gmm2)?;
    match solver {
        OtSolver::Exact => Ok(exact_ot_lp(gmm1.weights(), gmm2.weights(), &cost)?.cost.max(0.0)),
        OtSolver::Auto(_) if gmm1.n() * gmm2.n() <= EXACT_MAX_CELLS => {
            Ok(exact_ot_lp(gmm1.weights(), gmm2.weights(), &cost)?.cost.max(0.0))
        }
        OtSolver::Sinkhorn(schedule) | OtSolver::Auto(schedule) => {
            Ok(sinkhorn_annealed(gmm1.weights(), gmm2.weights(), &cost, schedule)?.cost_value.max(0.0))
        }
    }
}

/// Annealed Sinkhorn plan between two mixtures.
pub fn w2_gmm_plan(gmm1: &Gmm, gmm2: &Gmm, schedule: &EntropicSchedule) -> Result<TransportPlan> {
    let cost = cost_matrix(gmm1, gmm2)?;
    sinkhorn_annealed(gmm1.weights(), gmm2.weights(), &cost, schedule)
}

/// Gradient of the mixture distance with respect to the first weight
/// vector: the centered row potential. The additive gauge is irrelevant
/// once chained through a softmax.
pub fn grad_w2_weights(plan: &TransportPlan) -> Result<Vector> {
    if !plan.converged {
        return Err(Error::GradientUnreliable);
    }
    Ok(plan.dual_f.clone())
}

/// Gradient of the mixture distance in the first weight vector, centered.
///
/// Uses the entropic potentials. Near-diagonal costs at small `ε` can stall
/// the last annealing stage; small instances then fall back to the LP row
/// duals, a subgradient of the unregularized cost.
pub fn w2_weight_grad(gmm1: &Gmm, gmm2: &Gmm, schedule: &EntropicSchedule) -> Result<Vector> {
    let cost = cost_matrix(gmm1, gmm2)?;
    let plan = sinkhorn_annealed(gmm1.weights(), gmm2.weights(), &cost, schedule)?;
    match grad_w2_weights(&plan) {
        Ok(f) => Ok(f),
        Err(_) if gmm1.n() * gmm2.n() <= EXACT_MAX_CELLS => {
            let lp = exact_ot_lp(gmm1.weights(), gmm2.weights(), &cost)?;
            Ok(lp.dual_u.add_scalar(-lp.dual_u.mean()))
        }
        Err(e) => Err(e),
    }
}

//! Reproducible end-to-end runs: demonstrations, EM fit, adaptation over
//! several seeds, evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{demo_generate, evaluate_batch, joint_samples, rollout, EvalReport, TaskSpec};
use crate::error::{Error, Result};
use crate::gmm::{em_fit_traced, Gmm};
use crate::optimizer::{optimize, OptimizerConfig, RunOutcome, SuccessCriterion, UpdateMode};
use crate::policy_grad::{ScoreModel, Trajectory};

/// Everything needed to reproduce one task end to end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPreset {
    pub name: String,
    /// Task the demonstrations solve.
    pub original: TaskSpec,
    /// Task the policy is adapted to.
    pub task: TaskSpec,
    pub n_components: usize,
    pub n_demos: usize,
    pub demo_noise: f64,
    pub em_iters: usize,
    pub em_tol: f64,
    /// EM runs from different seedings; the most likely fit is kept.
    pub em_restarts: usize,
    pub max_env_steps: usize,
    pub optimizer: OptimizerConfig,
    pub success: SuccessCriterion,
}

impl TaskPreset {
    fn base(name: &str, n_components: usize, n_demos: usize, max_env_steps: usize) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            original: TaskSpec::original_from_preset(name)?,
            task: TaskSpec::from_preset(name)?,
            n_components,
            n_demos,
            demo_noise: 0.2,
            em_iters: 200,
            em_tol: 1e-6,
            em_restarts: 5,
            max_env_steps,
            optimizer: OptimizerConfig::default(),
            success: SuccessCriterion::default(),
        })
    }

    pub fn reaching() -> Self {
        Self::base("reaching", 7, 12, 150_000).expect("known preset")
    }

    pub fn collision() -> Self {
        let mut p = Self::base("collision", 3, 10, 200_000).expect("known preset");
        // A third batch at threshold weeds out policies that still graze an
        // obstacle now and then.
        p.success.streak = 3;
        // With a tight proximal term the weights stay pinned to the
        // component that hugs an obstacle.
        p.optimizer.tau = 100.0;
        p
    }

    pub fn multigoal() -> Self {
        // Weights do most of the work here: small Gaussian steps keep the
        // components of the wrong branch from being dragged across, and a
        // loose proximal term lets mass move between branches far apart.
        let mut p = Self::base("multigoal", 6, 12, 200_000).expect("known preset");
        // Endpoint scatter has to stay well inside the success radius for
        // the demonstrated goals to count as reached.
        p.demo_noise = 0.1;
        p.optimizer.tau = 100.0;
        p.optimizer.c_max = 0.02;
        p.optimizer.w2_trust_radius = 10.0;
        p.optimizer.weight_lr = 0.5;
        p
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "reaching" => Ok(Self::reaching()),
            "collision" => Ok(Self::collision()),
            "multigoal" => Ok(Self::multigoal()),
            other => Err(Error::Input(format!("unknown task preset '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.original.validate()?;
        self.task.validate()?;
        self.optimizer.validate()?;
        if self.n_components == 0 || self.n_demos == 0 {
            return Err(Error::Input("component and demo counts must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Demonstrations of the preset's original task.
pub fn generate_demos(preset: &TaskPreset, seed: u64) -> Result<Vec<Trajectory>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    demo_generate(&preset.original, preset.n_demos, &mut rng, preset.demo_noise)
}

/// EM fit of a joint state-action mixture to demonstrations, keeping the
/// most likely of `restarts` runs.
pub fn fit_policy(
    demos: &[Trajectory],
    n_components: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
    restarts: usize,
) -> Result<Gmm> {
    let data = joint_samples(demos);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Gmm)> = None;
    for _ in 0..restarts.max(1) {
        let report = em_fit_traced(&data, n_components, &mut rng, max_iters, tol)?;
        let ll = report.log_likelihood.last().cloned().unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(b, _)| ll > *b) {
            best = Some((ll, report.gmm));
        }
    }
    Ok(best.expect("at least one run").1)
}

/// Demonstrations and the policy fitted to them.
pub fn initial_policy(preset: &TaskPreset, seed: u64) -> Result<(Vec<Trajectory>, Gmm)> {
    let demos = generate_demos(preset, seed)?;
    let gmm = fit_policy(&demos, preset.n_components, seed, preset.em_iters, preset.em_tol, preset.em_restarts)?;
    Ok((demos, gmm))
}

/// Adapts `policy` to the preset's task with the given seed and mode.
pub fn run_seed(preset: &TaskPreset, policy: &Gmm, seed: u64, mode: UpdateMode, max_env_steps: usize) -> Result<RunOutcome> {
    let cfg = OptimizerConfig { mode, ..preset.optimizer.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    optimize(policy, &preset.task, &cfg, &mut rng, &preset.success, max_env_steps)
}

/// Success statistics of `episodes` fresh rollouts.
pub fn evaluate(policy: &Gmm, task: &TaskSpec, episodes: usize, seed: u64) -> Result<EvalReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = rollout(policy, &task.split(), task, episodes, &mut rng)?;
    Ok(evaluate_batch(&batch, task))
}

/// Assigns every component to the demo path whose samples give it the most
/// joint responsibility. Demo `i` follows path `i mod n_paths`.
pub fn component_branches(policy: &Gmm, demos: &[Trajectory], n_paths: usize, task: &TaskSpec) -> Result<Vec<usize>> {
    if n_paths == 0 {
        return Err(Error::Input("no demo paths".into()));
    }
    let model = ScoreModel::new(policy, &task.split())?;
    let mut mass = vec![vec![0.0; n_paths]; policy.n()];
    for (i, demo) in demos.iter().enumerate() {
        for st in &demo.steps {
            let (zj, _) = model.responsibilities(&st.state, &st.action)?;
            for (l, z) in zj.iter().enumerate() {
                mass[l][i % n_paths] += z;
            }
        }
    }
    Ok(mass
        .iter()
        .map(|m| (0..n_paths).max_by(|&a, &b| m[a].total_cmp(&m[b])).unwrap_or(0))
        .collect())
}

/// Index of the demo path whose endpoint is nearest to the task target.
pub fn desired_branch(task: &TaskSpec) -> usize {
    let end = |path: &Vec<Vec<f64>>| nalgebra::DVector::from_row_slice(path.last().expect("paths are non-empty"));
    (0..task.demo_paths.len())
        .min_by(|&a, &b| {
            task.target_error(&end(&task.demo_paths[a])).total_cmp(&task.target_error(&end(&task.demo_paths[b])))
        })
        .unwrap_or(0)
}

/// Total weight of the components assigned to `branch`.
pub fn branch_weight(policy: &Gmm, branches: &[usize], branch: usize) -> f64 {
    policy.weights().iter().zip(branches).filter(|(_, b)| **b == branch).map(|(w, _)| w).sum()
}

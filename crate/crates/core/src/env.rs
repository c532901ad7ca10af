//! Kinematic point-mass world driven by velocity commands, the three
//! benchmark tasks, and synthetic demonstrations.
//!
//! The state is the position, the action a velocity, and one step is an
//! explicit Euler update `p ← p + dt·a`. Obstacles are balls checked at
//! post-step positions only, so a single step can in principle jump across
//! a thin obstacle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{BlockSplit, Conditioner, Gmm};
use crate::linalg::Vector;
use crate::policy_grad::{RolloutBatch, Step, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Reaching,
    CollisionAvoidance,
    MultiGoal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    /// `−‖p − target‖` at every step.
    Dense,
    /// `−‖p − target‖` at the last step only.
    Sparse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoneReason {
    Horizon,
    Collision,
    Divergence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl Obstacle {
    pub fn contains(&self, p: &Vector) -> bool {
        let d2: f64 = self.center.iter().zip(p.iter()).map(|(c, x)| (x - c) * (x - c)).sum();
        d2 < self.radius * self.radius
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub d: usize,
    pub start: Vec<f64>,
    /// Rewards and success use the nearest target.
    pub targets: Vec<Vec<f64>>,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    pub horizon: usize,
    pub dt: f64,
    pub workspace_bound: f64,
    pub success_threshold: f64,
    /// Fraction of the episode, counted from its end, over which dense
    /// tasks average the position error for success.
    pub tail_fraction: f64,
    pub divergence_penalty: f64,
    pub collision_penalty: f64,
    pub reward_kind: RewardKind,
    /// Demonstration polylines; demo `i` follows path `i mod len`. Each path
    /// starts at `start`.
    pub demo_paths: Vec<Vec<Vec<f64>>>,
    /// Fraction of the horizon a demonstration spends moving; it then holds
    /// still at the end point.
    #[serde(default = "default_motion_fraction")]
    pub demo_motion_fraction: f64,
}

fn default_motion_fraction() -> f64 {
    0.75
}

/// Horizon shared by the presets.
pub const DEFAULT_HORIZON: usize = 200;

impl TaskSpec {
    fn preset(
        kind: TaskKind,
        targets: Vec<Vec<f64>>,
        obstacles: Vec<Obstacle>,
        reward_kind: RewardKind,
        demo_paths: Vec<Vec<Vec<f64>>>,
    ) -> Self {
        let max_norm = targets
            .iter()
            .map(|t| t.iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        Self {
            kind,
            d: 2,
            start: vec![0.0, 0.0],
            targets,
            obstacles,
            horizon: DEFAULT_HORIZON,
            dt: 0.01,
            workspace_bound: 3.0 * max_norm,
            success_threshold: 0.5,
            tail_fraction: 0.2,
            divergence_penalty: -10.0,
            collision_penalty: -10.0,
            reward_kind,
            demo_paths,
            demo_motion_fraction: default_motion_fraction(),
        }
    }

    fn reaching_paths() -> Vec<Vec<Vec<f64>>> {
        vec![vec![vec![0.0, 0.0], vec![6.0, 0.0], vec![6.0, -9.0]]]
    }

    fn collision_paths() -> Vec<Vec<Vec<f64>>> {
        vec![vec![vec![0.0, 0.0], vec![10.0, 0.0]]]
    }

    fn multigoal_paths() -> Vec<Vec<Vec<f64>>> {
        vec![vec![vec![0.0, 0.0], vec![8.0, 4.0]], vec![vec![0.0, 0.0], vec![8.0, -4.0]]]
    }

    fn gap_obstacles() -> Vec<Obstacle> {
        vec![
            Obstacle { center: vec![5.0, -0.8], radius: 0.9 },
            Obstacle { center: vec![5.0, -3.2], radius: 0.9 },
        ]
    }

    /// The demonstrated L-shaped reach, ending at (6, −9).
    pub fn reaching_original() -> Self {
        Self::preset(TaskKind::Reaching, vec![vec![6.0, -9.0]], vec![], RewardKind::Dense, Self::reaching_paths())
    }

    /// Reaching adapted to the target (6, −6.5).
    pub fn reaching() -> Self {
        Self::preset(TaskKind::Reaching, vec![vec![6.0, -6.5]], vec![], RewardKind::Dense, Self::reaching_paths())
    }

    /// Straight reach to (10, 0) in free space.
    pub fn collision_original() -> Self {
        Self::preset(TaskKind::CollisionAvoidance, vec![vec![10.0, 0.0]], vec![], RewardKind::Sparse, Self::collision_paths())
    }

    /// Target moved to (10, −2) with two obstacles in the way.
    pub fn collision() -> Self {
        Self::preset(
            TaskKind::CollisionAvoidance,
            vec![vec![10.0, -2.0]],
            Self::gap_obstacles(),
            RewardKind::Sparse,
            Self::collision_paths(),
        )
    }

    /// Either of the goals (8, 4) and (8, −4).
    pub fn multigoal_original() -> Self {
        let mut spec = Self::preset(
            TaskKind::MultiGoal,
            vec![vec![8.0, 4.0], vec![8.0, -4.0]],
            vec![],
            RewardKind::Sparse,
            Self::multigoal_paths(),
        );
        // Success is judged on the final position only, so no hold phase.
        // Demos that idle at the goals give the goal regions heavy
        // components that no rollout of the other branch ever visits.
        spec.demo_motion_fraction = 1.0;
        spec
    }

    /// Single target (8, 3.6) next to the first goal.
    pub fn multigoal() -> Self {
        let mut spec = Self::preset(
            TaskKind::MultiGoal,
            vec![vec![8.0, 3.6]],
            vec![],
            RewardKind::Sparse,
            Self::multigoal_paths(),
        );
        // Keep the bound and demos of the original two-goal layout.
        let original = Self::multigoal_original();
        spec.workspace_bound = original.workspace_bound;
        spec.demo_motion_fraction = original.demo_motion_fraction;
        spec
    }

    /// Adapted task by preset name: `reaching`, `collision` or `multigoal`.
    pub fn from_preset(name: &str) -> Result<Self> {
        match name {
            "reaching" => Ok(Self::reaching()),
            "collision" => Ok(Self::collision()),
            "multigoal" => Ok(Self::multigoal()),
            other => Err(Error::Input(format!("unknown task preset '{other}'"))),
        }
    }

    /// Demonstrated (pre-adaptation) task by preset name.
    pub fn original_from_preset(name: &str) -> Result<Self> {
        match name {
            "reaching" => Ok(Self::reaching_original()),
            "collision" => Ok(Self::collision_original()),
            "multigoal" => Ok(Self::multigoal_original()),
            other => Err(Error::Input(format!("unknown task preset '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Input(m.to_string()));
        if self.d == 0 {
            return bad("task dimension must be ≥ 1");
        }
        if self.horizon == 0 {
            return bad("horizon must be ≥ 1");
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        if self.start.len() != self.d {
            return Err(Error::Dimension { expected: self.d, got: self.start.len() });
        }
        if self.targets.is_empty() {
            return bad("at least one target is required");
        }
        for t in &self.targets {
            if t.len() != self.d {
                return Err(Error::Dimension { expected: self.d, got: t.len() });
            }
        }
        for o in &self.obstacles {
            if o.center.len() != self.d {
                return Err(Error::Dimension { expected: self.d, got: o.center.len() });
            }
            if o.radius.is_nan() || o.radius <= 0.0 {
                return bad("obstacle radii must be positive");
            }
        }
        // Written to reject NaN as well.
        if self.workspace_bound.is_nan() || self.workspace_bound <= 0.0 || self.success_threshold.is_nan() || self.success_threshold <= 0.0 {
            return bad("workspace bound and success threshold must be positive");
        }
        if !(self.tail_fraction > 0.0 && self.tail_fraction <= 1.0) {
            return bad("tail fraction must lie in (0, 1]");
        }
        if !(self.demo_motion_fraction > 0.0 && self.demo_motion_fraction <= 1.0) {
            return bad("demo motion fraction must lie in (0, 1]");
        }
        if self.divergence_penalty > 0.0 || self.collision_penalty > 0.0 {
            return bad("penalties must be ≤ 0");
        }
        for path in &self.demo_paths {
            if path.len() < 2 || path.iter().any(|p| p.len() != self.d) {
                return bad("demo paths need ≥ 2 points of the task dimension");
            }
        }
        Ok(())
    }

    pub fn split(&self) -> BlockSplit {
        BlockSplit { state_dim: self.d, action_dim: self.d }
    }

    pub fn start_vector(&self) -> Vector {
        Vector::from_row_slice(&self.start)
    }

    /// Distance to the nearest target.
    pub fn target_error(&self, p: &Vector) -> f64 {
        self.targets
            .iter()
            .map(|t| t.iter().zip(p.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .fold(f64::INFINITY, f64::min)
    }

    /// Whether one trajectory meets the task's success predicate.
    pub fn is_success(&self, traj: &Trajectory) -> bool {
        if traj.terminated_early() {
            return false;
        }
        match self.reward_kind {
            RewardKind::Dense => {
                let positions = trajectory_positions(traj, self.dt);
                // Positions after each step, i.e. excluding the start.
                let visited = &positions[1..];
                let tail = ((visited.len() as f64 * self.tail_fraction).ceil() as usize).clamp(1, visited.len());
                let errs = visited[visited.len() - tail..].iter().map(|p| self.target_error(p));
                errs.sum::<f64>() / tail as f64 <= self.success_threshold
            }
            RewardKind::Sparse => self.target_error(&final_position(traj, self.dt)) <= self.success_threshold,
        }
    }
}

/// Positions `p_0 … p_T` visited by a trajectory, the last one reached by
/// integrating the final action.
pub fn trajectory_positions(traj: &Trajectory, dt: f64) -> Vec<Vector> {
    let mut out: Vec<Vector> = traj.steps.iter().map(|s| s.state.clone()).collect();
    out.push(final_position(traj, dt));
    out
}

pub fn final_position(traj: &Trajectory, dt: f64) -> Vector {
    let last = traj.steps.last().expect("trajectories are non-empty");
    &last.state + &last.action * dt
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub position: Vector,
    pub step_index: usize,
    pub done: bool,
    pub done_reason: Option<DoneReason>,
}

pub fn reset(task: &TaskSpec) -> EnvState {
    EnvState { position: task.start_vector(), step_index: 0, done: false, done_reason: None }
}

/// One Euler step; returns the next state and the reward of the step.
pub fn step(state: &EnvState, action: &Vector, task: &TaskSpec) -> Result<(EnvState, f64)> {
    if state.done {
        return Err(Error::Contract("step called on a finished episode".into()));
    }
    if action.len() != task.d {
        return Err(Error::Dimension { expected: task.d, got: action.len() });
    }
    if action.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite action".into()));
    }
    let position = &state.position + action * task.dt;
    let step_index = state.step_index + 1;
    let mut next = EnvState { position, step_index, done: false, done_reason: None };
    if task.obstacles.iter().any(|o| o.contains(&next.position)) {
        next.done = true;
        next.done_reason = Some(DoneReason::Collision);
        return Ok((next, task.collision_penalty));
    }
    if next.position.norm() > task.workspace_bound {
        next.done = true;
        next.done_reason = Some(DoneReason::Divergence);
        return Ok((next, task.divergence_penalty));
    }
    let last = step_index >= task.horizon;
    if last {
        next.done = true;
        next.done_reason = Some(DoneReason::Horizon);
    }
    let reward = match task.reward_kind {
        RewardKind::Dense => -task.target_error(&next.position),
        RewardKind::Sparse if last => -task.target_error(&next.position),
        RewardKind::Sparse => 0.0,
    };
    Ok((next, reward))
}

/// One episode of `policy` with actions drawn from its GMR conditional.
pub fn run_episode<R: Rng + ?Sized>(cond: &Conditioner, task: &TaskSpec, rng: &mut R) -> Result<Trajectory> {
    let mut state = reset(task);
    let mut steps = Vec::with_capacity(task.horizon);
    while !state.done {
        let action = cond.sample(&state.position, rng)?;
        let (next, reward) = step(&state, &action, task)?;
        steps.push(Step { state: state.position.clone(), action, reward });
        state = next;
    }
    Trajectory::new(steps, state.done_reason.expect("finished episodes carry a reason"))
}

/// `m` episodes, each driven by its own generator seeded from `rng`. The
/// batch carries `γ = 1, β = 0`; callers set their own discount and
/// entropy weight.
pub fn rollout<R: Rng + ?Sized>(
    policy: &Gmm,
    split: &BlockSplit,
    task: &TaskSpec,
    m: usize,
    rng: &mut R,
) -> Result<RolloutBatch> {
    if m == 0 {
        return Err(Error::Input("rollout needs at least one episode".into()));
    }
    if split.state_dim != task.d || split.action_dim != task.d {
        return Err(Error::Dimension { expected: task.d, got: split.state_dim });
    }
    task.validate()?;
    let cond = Conditioner::new(policy, split)?;
    let seeds: Vec<u64> = (0..m).map(|_| rng.random()).collect();
    let trajectories = seeds
        .into_iter()
        .map(|seed| run_episode(&cond, task, &mut ChaCha8Rng::seed_from_u64(seed)))
        .collect::<Result<Vec<_>>>()?;
    RolloutBatch::new(trajectories, 1.0, 0.0)
}

/// Fraction of successful trajectories.
pub fn success_rate(batch: &RolloutBatch, task: &TaskSpec) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let hits = batch.trajectories.iter().filter(|t| task.is_success(t)).count();
    hits as f64 / batch.len() as f64
}

/// Summary statistics of an evaluation batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_final_error: f64,
    pub collision_rate: f64,
}

pub fn evaluate_batch(batch: &RolloutBatch, task: &TaskSpec) -> EvalReport {
    let n = batch.len().max(1) as f64;
    let final_err: f64 = batch
        .trajectories
        .iter()
        .map(|t| task.target_error(&final_position(t, task.dt)))
        .sum();
    let collisions = batch.trajectories.iter().filter(|t| t.done_reason == DoneReason::Collision).count();
    EvalReport {
        episodes: batch.len(),
        success_rate: success_rate(batch, task),
        mean_final_error: final_err / n,
        collision_rate: collisions as f64 / n,
    }
}

/// Point at arc length `s` along a polyline.
fn polyline_point(points: &[Vector], cumulative: &[f64], s: f64) -> Vector {
    let total = *cumulative.last().unwrap();
    if s >= total {
        return points.last().unwrap().clone();
    }
    let k = cumulative.partition_point(|&c| c <= s).clamp(1, points.len() - 1);
    let seg = cumulative[k] - cumulative[k - 1];
    let u = if seg > 0.0 { (s - cumulative[k - 1]) / seg } else { 0.0 };
    &points[k - 1] + (&points[k] - &points[k - 1]) * u
}

/// Demonstration speed at interior waypoints, relative to cruise speed.
const CORNER_SPEED: f64 = 0.35;
/// Arc length over which the speed recovers after a waypoint.
const CORNER_WIDTH: f64 = 1.5;
/// Fraction of the path, at its end, over which a demonstration brakes to
/// rest with constant deceleration.
const BRAKE_FRACTION: f64 = 0.15;
/// Resolution of the arc-length grid used to time a demonstration.
const TIMING_CELLS: usize = 4000;

/// Relative speed at arc length `s` of a path of length `total` with
/// interior waypoints at arc lengths `corners`.
fn demo_speed(s: f64, total: f64, corners: &[f64]) -> f64 {
    let mut v: f64 = 1.0;
    for &c in corners {
        let ramp = ((s - c).abs() / CORNER_WIDTH).min(1.0);
        v = v.min(CORNER_SPEED + (1.0 - CORNER_SPEED) * ramp);
    }
    let brake = BRAKE_FRACTION * total;
    if total - s < brake {
        v = v.min(((total - s) / brake).max(0.0).sqrt());
    }
    v
}

/// Arc lengths reached at `n + 1` equally spaced times, from 0 to `total`.
fn demo_timing(total: f64, corners: &[f64], n: usize) -> Vec<f64> {
    if total <= 0.0 {
        return vec![0.0; n + 1];
    }
    let h = total / TIMING_CELLS as f64;
    // Elapsed (unscaled) time at each grid node, midpoint rule per cell.
    let mut time = Vec::with_capacity(TIMING_CELLS + 1);
    time.push(0.0);
    for k in 0..TIMING_CELLS {
        let mid = (k as f64 + 0.5) * h;
        let last = *time.last().unwrap();
        time.push(last + h / demo_speed(mid, total, corners));
    }
    let duration = time[TIMING_CELLS];
    (0..=n)
        .map(|i| {
            if i == n {
                return total;
            }
            let t = duration * i as f64 / n as f64;
            let k = time.partition_point(|&x| x <= t).clamp(1, TIMING_CELLS);
            let u = (t - time[k - 1]) / (time[k] - time[k - 1]);
            ((k - 1) as f64 + u) * h
        })
        .collect()
}

/// Synthetic demonstrations along the task's demo paths.
///
/// Waypoints after the start receive isotropic Gaussian noise of scale
/// `noise_scale`. The path is traversed over the first
/// `demo_motion_fraction` of the horizon, slowing down around interior
/// waypoints and braking to rest at the end point, where the demonstrator
/// then stays. Actions are the finite differences of consecutive
/// positions. Rewards are zero.
pub fn demo_generate<R: Rng + ?Sized>(
    task: &TaskSpec,
    n_demos: usize,
    rng: &mut R,
    noise_scale: f64,
) -> Result<Vec<Trajectory>> {
    task.validate()?;
    if n_demos == 0 {
        return Err(Error::Input("at least one demonstration is required".into()));
    }
    if task.demo_paths.is_empty() {
        return Err(Error::Input("task has no demonstration paths".into()));
    }
    if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
        return Err(Error::Input("noise scale must be ≥ 0".into()));
    }
    let noise = Normal::new(0.0, noise_scale).map_err(|e| Error::Input(e.to_string()))?;
    let t_steps = task.horizon;
    let mut demos = Vec::with_capacity(n_demos);
    for i in 0..n_demos {
        let path = &task.demo_paths[i % task.demo_paths.len()];
        let points: Vec<Vector> = path
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let mut v = Vector::from_row_slice(p);
                if k > 0 && noise_scale > 0.0 {
                    v.iter_mut().for_each(|x| *x += noise.sample(rng));
                }
                v
            })
            .collect();
        let mut cumulative = vec![0.0];
        for w in points.windows(2) {
            let last = *cumulative.last().unwrap();
            cumulative.push(last + (&w[1] - &w[0]).norm());
        }
        let total = *cumulative.last().unwrap();
        let corners = &cumulative[1..cumulative.len() - 1];
        let moving = ((t_steps as f64 * task.demo_motion_fraction).round() as usize).clamp(1, t_steps);
        let mut arc = demo_timing(total, corners, moving);
        arc.resize(t_steps + 1, total);
        let positions: Vec<Vector> = arc.into_iter().map(|s| polyline_point(&points, &cumulative, s)).collect();
        let steps = positions
            .windows(2)
            .map(|w| Step { state: w[0].clone(), action: (&w[1] - &w[0]) / task.dt, reward: 0.0 })
            .collect();
        demos.push(Trajectory::new(steps, DoneReason::Horizon)?);
    }
    Ok(demos)
}

/// Joint `[s | a]` samples of a set of trajectories, for EM fitting.
pub fn joint_samples(trajectories: &[Trajectory]) -> Vec<Vector> {
    trajectories
        .iter()
        .flat_map(|t| t.steps.iter())
        .map(|s| Vector::from_iterator(s.state.len() + s.action.len(), s.state.iter().chain(s.action.iter()).cloned()))
        .collect()
}

/// One line of the trajectory dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub task: String,
    pub seed: u64,
    /// Rows `[s…, a…, r]`.
    pub steps: Vec<Vec<f64>>,
    pub done_reason: DoneReason,
}

impl TrajectoryRecord {
    pub fn from_trajectory(task: &str, seed: u64, traj: &Trajectory) -> Self {
        let steps = traj
            .steps
            .iter()
            .map(|s| s.state.iter().chain(s.action.iter()).cloned().chain([s.reward]).collect())
            .collect();
        Self { task: task.to_string(), seed, steps, done_reason: traj.done_reason }
    }

    pub fn to_trajectory(&self, d: usize) -> Result<Trajectory> {
        let steps = self
            .steps
            .iter()
            .map(|row| {
                if row.len() != 2 * d + 1 {
                    return Err(Error::Dimension { expected: 2 * d + 1, got: row.len() });
                }
                Ok(Step {
                    state: Vector::from_row_slice(&row[..d]),
                    action: Vector::from_row_slice(&row[d..2 * d]),
                    reward: row[2 * d],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Trajectory::new(steps, self.done_reason)
    }
}

/// Serializes trajectories as JSON lines.
pub fn trajectories_to_jsonl(task: &str, seed: u64, trajectories: &[Trajectory]) -> String {
    let mut out = String::new();
    for t in trajectories {
        out.push_str(&serde_json::to_string(&TrajectoryRecord::from_trajectory(task, seed, t)).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn trajectories_from_jsonl(text: &str, d: usize) -> Result<Vec<Trajectory>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let rec: TrajectoryRecord =
                serde_json::from_str(l).map_err(|e| Error::Input(format!("bad trajectory line: {e}")))?;
            rec.to_trajectory(d)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> Vector {
        Vector::from_row_slice(x)
    }

    #[test]
    fn zero_action_keeps_position() {
        let task = TaskSpec::reaching();
        let s = reset(&task);
        let (next, r) = step(&s, &v(&[0.0, 0.0]), &task).unwrap();
        assert_eq!(next.position, task.start_vector());
        assert!((r + task.target_error(&task.start_vector())).abs() < 1e-15);
        assert!(!next.done);
    }

    #[test]
    fn straight_line_reaches_target() {
        let mut task = TaskSpec::collision_original();
        task.reward_kind = RewardKind::Sparse;
        let target = v(&task.targets[0]);
        let vel = (&target - task.start_vector()) / (task.horizon as f64 * task.dt);
        let mut s = reset(&task);
        let mut last = f64::NAN;
        while !s.done {
            let (n, r) = step(&s, &vel, &task).unwrap();
            s = n;
            last = r;
        }
        assert_eq!(s.done_reason, Some(DoneReason::Horizon));
        assert!((&s.position - &target).norm() < 1e-9);
        assert!(last.abs() < 1e-9);
        assert!(step(&s, &vel, &task).is_err());
    }

    #[test]
    fn collision_terminates() {
        let task = TaskSpec::collision();
        let mut s = reset(&task);
        s.position = v(&[4.05, -0.8]);
        let (n, r) = step(&s, &v(&[10.0, 0.0]), &task).unwrap();
        assert_eq!(n.done_reason, Some(DoneReason::Collision));
        assert_eq!(r, task.collision_penalty);
    }

    #[test]
    fn divergence_terminates() {
        let task = TaskSpec::reaching();
        let s = reset(&task);
        let (n, r) = step(&s, &v(&[1e5, 0.0]), &task).unwrap();
        assert_eq!(n.done_reason, Some(DoneReason::Divergence));
        assert_eq!(r, task.divergence_penalty);
    }

    #[test]
    fn noiseless_reaching_demo_is_the_l_shape() {
        let task = TaskSpec::reaching();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let demos = demo_generate(&task, 1, &mut rng, 0.0).unwrap();
        let pos = trajectory_positions(&demos[0], task.dt);
        assert_eq!(pos.len(), task.horizon + 1);
        assert!((pos.last().unwrap() - v(&[6.0, -9.0])).norm() < 1e-9);
        for p in &pos {
            let on_first = p[1].abs() < 1e-9 && p[0] <= 6.0 + 1e-9;
            let on_second = (p[0] - 6.0).abs() < 1e-9 && p[1] <= 1e-9;
            assert!(on_first || on_second, "{p:?} is off the L");
        }
    }

    #[test]
    fn multigoal_demos_alternate() {
        let task = TaskSpec::multigoal();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let demos = demo_generate(&task, 12, &mut rng, 0.0).unwrap();
        let up = demos.iter().filter(|d| final_position(d, task.dt)[1] > 0.0).count();
        assert_eq!(up, 6);
    }

    #[test]
    fn jsonl_round_trip() {
        let task = TaskSpec::collision();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let demos = demo_generate(&task, 2, &mut rng, 0.1).unwrap();
        let text = trajectories_to_jsonl("collision", 3, &demos);
        assert_eq!(text.lines().count(), 2);
        assert_eq!(trajectories_from_jsonl(&text, 2).unwrap(), demos);
    }

    #[test]
    fn presets_validate() {
        for name in ["reaching", "collision", "multigoal"] {
            TaskSpec::from_preset(name).unwrap().validate().unwrap();
            TaskSpec::original_from_preset(name).unwrap().validate().unwrap();
        }
        assert!(TaskSpec::from_preset("maze").is_err());
    }
}

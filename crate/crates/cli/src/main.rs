mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use gmmflow::env::{trajectories_from_jsonl, trajectories_to_jsonl, EvalReport};
use gmmflow::experiment::{
    branch_weight, component_branches, desired_branch, evaluate, fit_policy, generate_demos, run_seed, TaskPreset,
};
use gmmflow::optimizer::{MetricsRow, RunOutcome};
use gmmflow::{Gmm, Trajectory, UpdateMode};
use log::{info, warn};
use serde::Serialize;

use config::{parse_seeds, resolve, RunConfig, Seeds};

/// Exit codes: 2 for bad input or I/O, 3 for numeric failure.
#[derive(Debug)]
pub enum CliError {
    Input(String),
    Numeric(String),
}

impl CliError {
    pub fn input(msg: impl Into<String>) -> Self {
        CliError::Input(msg.into())
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl From<gmmflow::Error> for CliError {
    fn from(e: gmmflow::Error) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Input(e.to_string())
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::input(format!("{}: {e}", path.display()))
}

#[derive(Parser)]
#[command(name = "gmmflow", version, about = "Adapt Gaussian-mixture motion policies with Wasserstein gradient flows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Riemannian,
    Ablation,
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    /// The task the demonstrations solve.
    Original,
    /// The task the policy is adapted to.
    Adapted,
}

#[derive(clap::Args)]
struct Common {
    /// TOML or JSON file overriding preset fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Task preset: reaching, collision or multigoal.
    #[arg(long)]
    task: Option<String>,
    /// A seed, a comma list, `a..b` or `a..=b`.
    #[arg(long, value_parser = parse_seeds)]
    seed: Option<Seeds>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic demonstrations of the original task.
    DemoGen {
        #[command(flatten)]
        common: Common,
    },
    /// Fit the joint state-action mixture to demonstrations.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Demonstrations; defaults to `<out>/demos.jsonl`.
        #[arg(long)]
        demos: Option<PathBuf>,
    },
    /// Adapt a fitted policy to the new task, once per seed.
    Optimize {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "riemannian")]
        mode: Mode,
        #[arg(long)]
        max_env_steps: Option<usize>,
        /// Policy to adapt; defaults to `<out>/policy.json`.
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Demonstrations used to assign components to paths; defaults to
        /// `<out>/demos.jsonl` when present.
        #[arg(long)]
        demos: Option<PathBuf>,
        /// Rollouts in the final evaluation of each seed.
        #[arg(long, default_value_t = 100)]
        episodes: usize,
    },
    /// Roll out a policy and report success statistics.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/policy.json`.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, value_enum, default_value = "adapted")]
        target: Target,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("gmmflow: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(command: Command) -> Result<ExitCode, CliError> {
    match command {
        Command::DemoGen { common } => {
            let cfg = resolve_common(&common, &[0], None)?;
            demo_gen(&cfg)
        }
        Command::Fit { common, demos } => {
            let cfg = resolve_common(&common, &[0], None)?;
            fit(&cfg, demos)
        }
        Command::Optimize { common, mode, max_env_steps, policy, demos, episodes } => {
            let cfg = resolve_common(&common, &[0, 1, 2, 3, 4], max_env_steps)?;
            let mode = match mode {
                Mode::Riemannian => UpdateMode::Riemannian,
                Mode::Ablation => UpdateMode::CholeskyAblation,
            };
            optimize(&cfg, mode, policy, demos, episodes)
        }
        Command::Evaluate { common, policy, episodes, target } => {
            let cfg = resolve_common(&common, &[0], None)?;
            evaluate_cmd(&cfg, policy, episodes, target, common.out.is_some())
        }
    }
}

fn resolve_common(c: &Common, default_seeds: &[u64], max_env_steps: Option<usize>) -> Result<RunConfig, CliError> {
    resolve(c.config.as_deref(), c.task.as_deref(), c.seed.as_ref().map(|s| s.0.as_slice()), default_seeds, max_env_steps, c.out.as_deref())
}

fn single_seed(cfg: &RunConfig) -> Result<u64, CliError> {
    match cfg.seeds.as_slice() {
        [s] => Ok(*s),
        _ => Err(CliError::input("this command takes a single seed")),
    }
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn read_demos(path: &Path, preset: &TaskPreset) -> Result<Vec<Trajectory>, CliError> {
    Ok(trajectories_from_jsonl(&read(path)?, preset.original.split().state_dim)?)
}

fn read_policy(path: &Path) -> Result<Gmm, CliError> {
    Ok(Gmm::from_json(&read(path)?)?)
}

fn demo_gen(cfg: &RunConfig) -> Result<ExitCode, CliError> {
    let seed = single_seed(cfg)?;
    let demos = generate_demos(&cfg.preset, seed)?;
    let path = cfg.output_dir.join("demos.jsonl");
    write(&path, &trajectories_to_jsonl(&cfg.preset.name, seed, &demos))?;
    println!("{} demonstrations → {}", demos.len(), path.display());
    Ok(ExitCode::SUCCESS)
}

fn fit(cfg: &RunConfig, demos: Option<PathBuf>) -> Result<ExitCode, CliError> {
    let seed = single_seed(cfg)?;
    let p = &cfg.preset;
    let demos_path = demos.unwrap_or_else(|| cfg.output_dir.join("demos.jsonl"));
    let demos = read_demos(&demos_path, p)?;
    let gmm = fit_policy(&demos, p.n_components, seed, p.em_iters, p.em_tol, p.em_restarts)?;
    let path = cfg.output_dir.join("policy.json");
    write(&path, &gmm.to_json())?;
    println!("{}-component policy → {}", gmm.n(), path.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct EvaluateReport {
    task: String,
    target: &'static str,
    seed: u64,
    #[serde(flatten)]
    report: EvalReport,
}

/// Prints the report; with `--out` it is also saved as `eval_<target>.json`.
fn evaluate_cmd(
    cfg: &RunConfig,
    policy: Option<PathBuf>,
    episodes: usize,
    target: Target,
    save: bool,
) -> Result<ExitCode, CliError> {
    let seed = single_seed(cfg)?;
    if episodes == 0 {
        return Err(CliError::input("episodes must be ≥ 1"));
    }
    let policy = read_policy(&policy.unwrap_or_else(|| cfg.output_dir.join("policy.json")))?;
    let (task, name) = match target {
        Target::Original => (&cfg.preset.original, "original"),
        Target::Adapted => (&cfg.preset.task, "adapted"),
    };
    let report = evaluate(&policy, task, episodes, seed)?;
    let doc = EvaluateReport { task: cfg.preset.name.clone(), target: name, seed, report };
    let text = serde_json::to_string_pretty(&doc).expect("report serializes");
    if save {
        write(&cfg.output_dir.join(format!("eval_{name}.json")), &text)?;
    }
    println!("{text}");
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct SeedSummary {
    seed: u64,
    /// `converged`, `unconverged` or `numeric_failure`.
    status: &'static str,
    converged: bool,
    first_success_step: Option<usize>,
    first_perfect_step: Option<usize>,
    /// `(env_steps, batch success rate)` per outer iteration.
    success_curve: Vec<(usize, f64)>,
    final_eval: Option<EvalReport>,
    desired_branch_weight: Option<f64>,
    numeric_aborts: usize,
    plateau_flagged: bool,
    env_steps: usize,
    wallclock_s: f64,
    error: Option<String>,
}

#[derive(Serialize)]
struct Summary {
    task: String,
    mode: &'static str,
    max_env_steps: usize,
    eval_episodes: usize,
    converged_seeds: usize,
    /// Population standard deviation of the final evaluation success rates.
    final_success_std: Option<f64>,
    seeds: Vec<SeedSummary>,
}

/// Evaluation rollouts use a stream disjoint from the training seeds.
const EVAL_SEED_OFFSET: u64 = 1_000_000;

fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| io_err(path, e))?;
    }
    if rows.is_empty() {
        w.write_record(gmmflow::optimizer::METRICS_HEADER.split(',')).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn optimize(
    cfg: &RunConfig,
    mode: UpdateMode,
    policy: Option<PathBuf>,
    demos: Option<PathBuf>,
    episodes: usize,
) -> Result<ExitCode, CliError> {
    let p = &cfg.preset;
    let initial = read_policy(&policy.unwrap_or_else(|| cfg.output_dir.join("policy.json")))?;
    let demos_path = demos.unwrap_or_else(|| cfg.output_dir.join("demos.jsonl"));
    let n_paths = p.original.demo_paths.len();
    let branches = if n_paths > 1 && demos_path.exists() {
        let demos = read_demos(&demos_path, p)?;
        Some(component_branches(&initial, &demos, n_paths, &p.original)?)
    } else {
        None
    };
    let suffix = match mode {
        UpdateMode::Riemannian => "",
        UpdateMode::CholeskyAblation => "_ablation",
    };
    fs::create_dir_all(&cfg.output_dir).map_err(|e| io_err(&cfg.output_dir, e))?;

    let mut seeds = Vec::new();
    for &seed in &cfg.seeds {
        info!("{} seed {seed}", p.name);
        let clock = Instant::now();
        let outcome = run_seed(p, &initial, seed, mode, cfg.max_env_steps);
        let wallclock_s = clock.elapsed().as_secs_f64();
        let summary = match outcome {
            Ok(out) => {
                write_metrics(&cfg.output_dir.join(format!("metrics{suffix}_seed{seed}.csv")), &out.metrics)?;
                write(&cfg.output_dir.join(format!("policy{suffix}_seed{seed}.json")), &out.policy.to_json())?;
                seed_summary(seed, &out, p, branches.as_deref(), episodes, wallclock_s)?
            }
            Err(e) if e.is_numeric() => {
                warn!("seed {seed}: {e}");
                SeedSummary {
                    seed,
                    status: "numeric_failure",
                    converged: false,
                    first_success_step: None,
                    first_perfect_step: None,
                    success_curve: Vec::new(),
                    final_eval: None,
                    desired_branch_weight: None,
                    numeric_aborts: 0,
                    plateau_flagged: false,
                    env_steps: 0,
                    wallclock_s,
                    error: Some(e.to_string()),
                }
            }
            Err(e) => return Err(e.into()),
        };
        println!(
            "seed {seed}: {} final success {} ({:.1} s)",
            summary.status,
            summary.final_eval.map_or("n/a".into(), |r| format!("{:.2}", r.success_rate)),
            wallclock_s
        );
        seeds.push(summary);
    }

    let rates: Vec<f64> = seeds.iter().filter_map(|s| s.final_eval.map(|r| r.success_rate)).collect();
    let final_success_std = (!rates.is_empty()).then(|| {
        let mean = rates.iter().sum::<f64>() / rates.len() as f64;
        (rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / rates.len() as f64).sqrt()
    });
    // Every seed runs regardless; the exit code flags numeric trouble in any.
    let failed = seeds.iter().any(|s| s.status == "numeric_failure" || s.numeric_aborts > 0);
    let summary = Summary {
        task: p.name.clone(),
        mode: if suffix.is_empty() { "riemannian" } else { "ablation" },
        max_env_steps: cfg.max_env_steps,
        eval_episodes: episodes,
        converged_seeds: seeds.iter().filter(|s| s.converged).count(),
        final_success_std,
        seeds,
    };
    let path = cfg.output_dir.join(format!("summary{suffix}.json"));
    write(&path, &serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    println!("{}/{} seeds converged → {}", summary.converged_seeds, summary.seeds.len(), path.display());
    Ok(if failed { ExitCode::from(3) } else { ExitCode::SUCCESS })
}

fn seed_summary(
    seed: u64,
    out: &RunOutcome,
    preset: &TaskPreset,
    branches: Option<&[usize]>,
    episodes: usize,
    wallclock_s: f64,
) -> Result<SeedSummary, CliError> {
    let final_eval = if episodes > 0 {
        Some(evaluate(&out.policy, &preset.task, episodes, seed + EVAL_SEED_OFFSET)?)
    } else {
        None
    };
    let desired_branch_weight = branches.map(|b| branch_weight(&out.policy, b, desired_branch(&preset.task)));
    Ok(SeedSummary {
        seed,
        status: if out.succeeded { "converged" } else { "unconverged" },
        converged: out.succeeded,
        first_success_step: out.first_success_step,
        first_perfect_step: out.first_perfect_step,
        success_curve: out.metrics.iter().map(|m| (m.env_steps, m.success_rate)).collect(),
        final_eval,
        desired_branch_weight,
        numeric_aborts: out.numeric_aborts,
        plateau_flagged: out.plateau_flagged,
        env_steps: out.metrics.last().map_or(0, |m| m.env_steps),
        wallclock_s,
        error: None,
    })
}

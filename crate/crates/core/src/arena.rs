//! Benchmark arena: a steerable synthetic walker, two environments and the
//! success-rate sweep over particle budgets and guidance schedules.

use std::time::Instant;

use nalgebra::{DVector, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::AugmentedState;
use crate::error::{Error, Result};
use crate::gp::KernelParams;
use crate::lvm::{LatentModel, LatentRole};
use crate::multiscale::{cascade, LevelSchedule, PiOptions};
use crate::planner::{plan, PlannerConfig};
use crate::synth::{generate, GeneratorSpec, OracleKind};
use crate::tasks::{CostFamily, Goal, Obstacle, Rect, StartState, Task, TaskConfig};

/// Knobs of the walker model built around known latent coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkerSpec {
    pub dim: usize,
    pub frame_rate: f64,
    pub frames_per_cycle: usize,
    pub cycles: usize,
    /// Peak yaw rate (rad/s) present in the training data.
    pub turn_amplitude: f64,
    pub speed: f64,
    pub dynamics: KernelParams,
    pub mapping: KernelParams,
    pub seed: u64,
}

impl Default for WalkerSpec {
    fn default() -> Self {
        Self {
            dim: 8,
            frame_rate: 10.0,
            frames_per_cycle: 10,
            cycles: 12,
            turn_amplitude: 0.8,
            speed: 1.0,
            dynamics: KernelParams::new(1.0, 1.0, 25.0),
            mapping: KernelParams::new(1.0, 1.0, 1e4),
            seed: 0,
        }
    }
}

/// Walker whose two phase dimensions cycle deterministically and whose third
/// (turn) dimension is the only noisy, steerable one.
pub fn walker_model(spec: &WalkerSpec) -> Result<LatentModel> {
    let mut g = GeneratorSpec::new(OracleKind::Circle, spec.dim);
    g.frame_rate = spec.frame_rate;
    g.frames_per_cycle = spec.frames_per_cycle;
    g.cycles = spec.cycles;
    g.turn_amplitude = spec.turn_amplitude;
    g.speed = spec.speed;
    g.seed = spec.seed;
    if spec.turn_amplitude == 0.0 {
        return Err(Error::invalid("walker needs a non-zero turn amplitude"));
    }
    let out = generate(&g)?;
    LatentModel::from_coordinates(
        &out.dataset,
        out.latent,
        spec.dynamics,
        spec.mapping,
        vec![LatentRole::PeriodicPhase, LatentRole::PeriodicPhase, LatentRole::Free],
    )
}

/// Start state: first training latent point with the turn coordinate zeroed,
/// at the origin facing +x.
pub fn walker_start(model: &LatentModel) -> AugmentedState {
    let mut x: DVector<f64> = model.latent().row(0).transpose();
    x[2] = 0.0;
    AugmentedState::new(x, Vector3::zeros())
}

/// A named task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub name: String,
    pub task: TaskConfig,
}

fn arena_config(horizon: usize, obstacles: Vec<Obstacle>) -> TaskConfig {
    TaskConfig {
        domain: Rect { min: [-2.0, -5.0], max: [10.0, 5.0] },
        obstacles,
        forbidden_strips: vec![],
        goal: Some(Goal { center: [5.5, 0.0], radius: 1.0 }),
        cost: CostFamily::Goal { goal_weight: 0.1 },
        horizon,
        resolution: 0.1,
        chain: None,
        start: Some(StartState { latent: None, global: [0.0, 0.0, 0.0] }),
    }
}

/// No obstacles between start and goal.
pub fn open_field(horizon: usize) -> Environment {
    Environment { name: "open".into(), task: arena_config(horizon, vec![]) }
}

/// Two discs staggered across the straight line to the goal.
pub fn two_obstacles(horizon: usize) -> Environment {
    Environment {
        name: "two-obstacles".into(),
        task: arena_config(
            horizon,
            vec![
                Obstacle::Circle { center: [2.6, 0.35], radius: 0.9 },
                Obstacle::Circle { center: [4.2, -0.75], radius: 0.9 },
            ],
        ),
    }
}

/// A planner configuration: particle count plus an optional multiscale schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Case {
    pub name: String,
    pub particles: usize,
    #[serde(default)]
    pub schedule: Option<LevelSchedule>,
}

impl Case {
    pub fn naive(particles: usize) -> Self {
        Self { name: format!("naive-{particles}"), particles, schedule: None }
    }

    pub fn multiscale(particles: usize, schedule: LevelSchedule) -> Self {
        Self { name: format!("multiscale-{particles}"), particles, schedule: Some(schedule) }
    }
}

/// Outcome of one (case, environment, seed) cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub success: bool,
    pub dp_operations: u64,
    pub wallclock_s: f64,
}

/// Plans once; planner failures (every particle in collision, no finite
/// path) count as unsuccessful trials.
pub fn run_trial(model: &LatentModel, task: &Task, start: &AugmentedState, case: &Case, seed: u64, opts: &PiOptions) -> Result<Trial> {
    let t0 = Instant::now();
    let k = task.horizon();
    let mut cfg = PlannerConfig::new(case.particles, k, seed);
    cfg.step = opts.step;
    if let Some(schedule) = &case.schedule {
        match cascade(model, task, start, schedule, seed ^ 0x5DEE_CE66, opts) {
            Ok(u) => cfg = cfg.with_guidance(u),
            Err(Error::DegenerateWeights { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    let (success, dp_operations) = match plan(model, task, start, &cfg) {
        Ok(p) => (p.diagnostics.success, p.diagnostics.dp_operations),
        Err(Error::NoFeasiblePath | Error::DegenerateWeights { .. }) => (false, dp_ops(case.particles, k)),
        Err(e) => return Err(e),
    };
    Ok(Trial { success, dp_operations, wallclock_s: t0.elapsed().as_secs_f64() })
}

/// DP operation count of one full planner run: `N + N^2 (K - 1)`.
pub fn dp_ops(particles: usize, horizon: usize) -> u64 {
    let n = particles as u64;
    n + n * n * (horizon as u64).saturating_sub(1)
}

/// Aggregated results of one (case, environment) row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub case: String,
    pub env: String,
    pub successes: usize,
    pub trials: usize,
    pub rate: f64,
    pub mean_wallclock_s: f64,
    pub dp_operations: u64,
}

/// Runs every case on every environment over `seeds`, cells in parallel.
pub fn sweep(
    model: &LatentModel,
    envs: &[Environment],
    cases: &[Case],
    seeds: &[u64],
    start: &AugmentedState,
    opts: &PiOptions,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for env in envs {
        let task = Task::new(env.task.clone())?;
        for case in cases {
            let trials = seeds
                .par_iter()
                .map(|&s| run_trial(model, &task, start, case, s, opts))
                .collect::<Result<Vec<_>>>()?;
            let successes = trials.iter().filter(|t| t.success).count();
            let n = trials.len();
            rows.push(SweepRow {
                case: case.name.clone(),
                env: env.name.clone(),
                successes,
                trials: n,
                rate: if n == 0 { 0.0 } else { successes as f64 / n as f64 },
                mean_wallclock_s: if n == 0 { 0.0 } else { trials.iter().map(|t| t.wallclock_s).sum::<f64>() / n as f64 },
                dp_operations: trials.iter().map(|t| t.dp_operations).max().unwrap_or(0),
            });
        }
    }
    Ok(rows)
}

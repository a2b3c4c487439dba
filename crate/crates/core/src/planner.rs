//! MAP trajectory search: Viterbi over a trellis whose nodes are the
//! particles of a particle filter run on the latent dynamics.

use nalgebra::{DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{global_step, wrap_angle, AugmentedState, LatentDynamics};
use crate::error::{Error, Result};
use crate::multiscale::ControlSequence;
use crate::tasks::Task;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub particles: usize,
    pub horizon: usize,
    pub seed: u64,
    /// Resample when ESS drops below this fraction of the particle count.
    pub resample_threshold: f64,
    /// Turning this off freezes particle identities across steps.
    pub resample: bool,
    /// Time step in seconds; `None` uses the model's frame period.
    pub step: Option<f64>,
    /// Per-step latent controls in noise standard deviations per second.
    #[serde(skip)]
    pub guidance: Option<ControlSequence>,
    /// Keep every step's particle set in the returned plan.
    pub record_trellis: bool,
}

impl PlannerConfig {
    pub fn new(particles: usize, horizon: usize, seed: u64) -> Self {
        Self {
            particles,
            horizon,
            seed,
            resample_threshold: 0.5,
            resample: true,
            step: None,
            guidance: None,
            record_trellis: false,
        }
    }

    pub fn with_guidance(mut self, u: ControlSequence) -> Self {
        self.guidance = Some(u);
        self
    }

    fn validate(&self, latent_dim: usize) -> Result<()> {
        if self.particles == 0 || self.horizon == 0 {
            return Err(Error::invalid("particle count and horizon must be at least 1"));
        }
        if !(self.resample_threshold > 0.0 && self.resample_threshold <= 1.0) {
            return Err(Error::invalid("resample threshold must be in (0, 1]"));
        }
        if self.step.is_some_and(|h| !(h > 0.0)) {
            return Err(Error::invalid("time step must be positive"));
        }
        if let Some(u) = &self.guidance {
            if u.len() < self.horizon || u.dim() != latent_dim {
                return Err(Error::invalid(format!(
                    "guidance must have {} rows of dimension {latent_dim}",
                    self.horizon
                )));
            }
        }
        Ok(())
    }
}

/// `1 / sum(w^2)`.
pub fn ess(w: &[f64]) -> f64 {
    1.0 / w.iter().map(|v| v * v).sum::<f64>()
}

/// `n` systematic draws from `w` with offset `u0 ∈ [0, 1/n)`.
pub fn systematic_resample_with_offset(w: &[f64], n: usize, u0: f64) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    let mut cum = w[0];
    let mut j = 0;
    for i in 0..n {
        let pos = u0 + i as f64 / n as f64;
        while pos >= cum && j + 1 < w.len() {
            j += 1;
            cum += w[j];
        }
        out.push(j);
    }
    out
}

/// Systematic resampling: `N` indices, index `i` appearing `N w_i` times up to rounding.
pub fn systematic_resample<R: Rng + ?Sized>(w: &[f64], rng: &mut R) -> Vec<usize> {
    let u0 = rng.random::<f64>() / w.len() as f64;
    systematic_resample_with_offset(w, w.len(), u0)
}

/// Everything the passive transition density from one state needs.
#[derive(Debug, Clone)]
pub struct PassiveStep {
    pub latent_mean: DVector<f64>,
    pub latent_var: f64,
    pub pose: DVector<f64>,
    pub pose_var: f64,
    /// Global pose after a noise-free step.
    pub global_mean: Vector3<f64>,
    h: f64,
    has_global: bool,
    latent_norm: f64,
    global_var: f64,
    global_norm: f64,
}

impl PassiveStep {
    pub fn new<M: LatentDynamics + ?Sized>(model: &M, state: &AugmentedState, h: f64) -> Self {
        let (latent_mean, latent_var) = model.step(&state.latent);
        let (pose, pose_var) = model.pose_with_variance(&state.latent);
        let channels = model.velocity_channels();
        let global_mean = match channels {
            Some(c) => global_step(&state.global, &pose, [0.0; 3], [0.0; 3], c, h),
            None => state.global,
        };
        let latent_var = latent_var.max(0.0);
        let pose_var = pose_var.max(0.0);
        let global_var = h * h * pose_var;
        Self {
            latent_mean,
            latent_var,
            pose,
            pose_var,
            global_mean,
            h,
            has_global: channels.is_some(),
            latent_norm: log_norm(latent_var),
            global_var,
            global_norm: log_norm(global_var),
        }
    }

    /// `log p(next | state)` under the unguided model. Masked-out (phase)
    /// dimensions do not contribute; zero-variance dimensions are point masses.
    pub fn log_density(&self, next: &AugmentedState, noisy: &[bool]) -> f64 {
        let mut lp = 0.0;
        for (d, &on) in noisy.iter().enumerate() {
            if on {
                lp += gauss(next.latent[d] - self.latent_mean[d], self.latent_var, self.latent_norm, self.latent_mean[d]);
            }
        }
        if self.has_global {
            let (var, norm) = (self.global_var, self.global_norm);
            lp += gauss(next.global[0] - self.global_mean[0], var, norm, self.global_mean[0]);
            lp += gauss(next.global[1] - self.global_mean[1], var, norm, self.global_mean[1]);
            lp += gauss(wrap_angle(next.global[2] - self.global_mean[2]), var, norm, self.global_mean[2]);
        }
        lp
    }
}

fn log_norm(var: f64) -> f64 {
    if var > 0.0 {
        -0.5 * (LN_2PI + var.ln())
    } else {
        0.0
    }
}

fn gauss(diff: f64, var: f64, norm: f64, scale: f64) -> f64 {
    if var > 0.0 {
        -0.5 * diff * diff / var + norm
    } else if diff.abs() <= 1e-12 * (1.0 + scale.abs()) {
        0.0
    } else {
        f64::NEG_INFINITY
    }
}

/// `log p(next | prev)` for the planner's augmented state.
pub fn transition_log_density<M: LatentDynamics + ?Sized>(model: &M, prev: &AugmentedState, next: &AugmentedState, h: f64) -> f64 {
    PassiveStep::new(model, prev, h).log_density(next, &model.noisy_mask())
}

/// Samples the successor of `state`, with optional guidance control `u`.
pub fn propagate<M: LatentDynamics + ?Sized, R: Rng + ?Sized>(
    model: &M,
    step: &PassiveStep,
    state: &AugmentedState,
    u: Option<&DVector<f64>>,
    noisy: &[bool],
    rng: &mut R,
) -> AugmentedState {
    let sd = step.latent_var.sqrt();
    let mut latent = step.latent_mean.clone();
    for (d, &on) in noisy.iter().enumerate() {
        if on {
            let z: f64 = StandardNormal.sample(rng);
            let push = u.map_or(0.0, |u| sd * u[d] * step.h);
            latent[d] += push + sd * z;
        }
    }
    let global = match model.velocity_channels() {
        Some(c) => {
            let noise: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
            global_step(&state.global, &step.pose, [step.pose_var; 3], noise, c, step.h)
        }
        None => state.global,
    };
    AugmentedState::new(latent, global)
}

/// Per-step record of the particle trellis. Particles, scores and
/// back-pointers are stored after any resampling at that step, so `psi` of
/// step `k + 1` indexes into `particles` of step `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrellisStep {
    pub particles: Vec<AugmentedState>,
    pub costs: Vec<f64>,
    pub delta: Vec<f64>,
    pub psi: Vec<usize>,
    /// Normalized weights before resampling.
    pub weights: Vec<f64>,
    /// Source indices when resampling fired at this step.
    pub resampled_from: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trellis {
    /// Index 0 is the start state.
    pub steps: Vec<TrellisStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDiagnostics {
    pub ess_history: Vec<f64>,
    pub resample_steps: Vec<usize>,
    /// Transition-density evaluations in the Viterbi recursion.
    pub dp_operations: u64,
    /// Some particle in the goal region (or, without a goal, with finite score) at the final step.
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub start: AugmentedState,
    /// `x̄*_{1:K}`
    pub states: Vec<AugmentedState>,
    /// `y*_{1:K} = μ_Y(x*_k)` with channel offsets
    pub poses: Vec<DVector<f64>>,
    pub costs: Vec<f64>,
    /// DP score along the path; the last entry is the log posterior.
    pub delta: Vec<f64>,
    pub log_posterior: f64,
    pub diagnostics: PlanDiagnostics,
    pub trellis: Option<Trellis>,
}

fn particle_rng(seed: u64, step: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((step as u64) << 32) | index as u64);
    rng
}

fn resample_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((step as u64) << 32) | 0xFFFF_FFFF);
    rng
}

fn argmax_lowest(v: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in v.enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

/// Runs the forward particle/Viterbi recursion and backtracks the MAP trajectory.
pub fn plan<M: LatentDynamics + ?Sized>(model: &M, task: &Task, start: &AugmentedState, cfg: &PlannerConfig) -> Result<Plan> {
    cfg.validate(model.latent_dim())?;
    if start.latent.len() != model.latent_dim() {
        return Err(Error::invalid("start latent dimension differs from the model"));
    }
    let h = cfg.step.unwrap_or(1.0 / model.frame_rate());
    let n = cfg.particles;
    let noisy = model.noisy_mask();
    let start_pose = model.pose(&start.latent);
    if task.cost(&start_pose, &start.global, 0).is_infinite() {
        log::warn!("start state is in collision or outside the domain");
    }

    let mut particles = vec![start.clone(); n];
    let mut delta = vec![0.0; n];
    let mut log_w = vec![-(n as f64).ln(); n];
    let mut steps = vec![TrellisStep {
        particles: vec![start.clone()],
        costs: vec![0.0],
        delta: vec![0.0],
        psi: vec![0],
        weights: vec![1.0],
        resampled_from: None,
    }];
    // the start layer is stored once; step 1 parents all point at it
    let mut first = true;
    let mut diag = PlanDiagnostics {
        ess_history: Vec::with_capacity(cfg.horizon),
        resample_steps: Vec::new(),
        dp_operations: 0,
        success: false,
    };

    for k in 1..=cfg.horizon {
        let u = cfg.guidance.as_ref().map(|g| &g.controls[k - 1]);
        let parents: Vec<PassiveStep> = if first {
            vec![PassiveStep::new(model, start, h)]
        } else {
            particles.par_iter().map(|p| PassiveStep::new(model, p, h)).collect()
        };
        let parent_delta: Vec<f64> = if first { vec![0.0] } else { delta.clone() };
        let parent_of = |i: usize| if first { 0 } else { i };

        let next: Vec<(AugmentedState, f64)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = particle_rng(cfg.seed, k, i);
                let src = parent_of(i);
                let prev = if first { start } else { &particles[src] };
                let s = propagate(model, &parents[src], prev, u, &noisy, &mut rng);
                let pose = model.pose(&s.latent);
                let q = task.cost(&pose, &s.global, k);
                (s, q)
            })
            .collect();

        let dp: Vec<(f64, usize)> = next
            .par_iter()
            .map(|(s, q)| {
                let (j, val) = argmax_lowest(parents.iter().zip(&parent_delta).map(|(p, d)| d + p.log_density(s, &noisy)));
                (val - q, j)
            })
            .collect();
        diag.dp_operations += (parents.len() * n) as u64;

        for (lw, (_, q)) in log_w.iter_mut().zip(&next) {
            *lw -= q;
        }
        let max_lw = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max_lw == f64::NEG_INFINITY {
            return Err(Error::DegenerateWeights { step: k });
        }
        let unnorm: Vec<f64> = log_w.iter().map(|v| (v - max_lw).exp()).collect();
        let total: f64 = unnorm.iter().sum();
        let weights: Vec<f64> = unnorm.iter().map(|v| v / total).collect();
        let e = ess(&weights);
        diag.ess_history.push(e);

        let (mut new_particles, mut costs): (Vec<_>, Vec<_>) = next.into_iter().unzip();
        let (mut new_delta, mut psi): (Vec<_>, Vec<_>) = dp.into_iter().unzip();
        let mut resampled_from = None;
        if cfg.resample && e < cfg.resample_threshold * n as f64 {
            let idx = systematic_resample(&weights, &mut resample_rng(cfg.seed, k));
            new_particles = idx.iter().map(|&i| new_particles[i].clone()).collect();
            costs = idx.iter().map(|&i| costs[i]).collect();
            new_delta = idx.iter().map(|&i| new_delta[i]).collect();
            psi = idx.iter().map(|&i| psi[i]).collect();
            log_w = vec![-(n as f64).ln(); n];
            diag.resample_steps.push(k);
            resampled_from = Some(idx);
        } else {
            log_w = weights.iter().map(|w| w.ln()).collect();
        }

        particles = new_particles;
        delta = new_delta;
        steps.push(TrellisStep {
            particles: particles.clone(),
            costs,
            delta: delta.clone(),
            psi,
            weights,
            resampled_from,
        });
        first = false;
    }

    let (mut idx, best) = argmax_lowest(delta.iter().copied());
    if best == f64::NEG_INFINITY {
        return Err(Error::NoFeasiblePath);
    }
    let last = &steps[cfg.horizon];
    diag.success = match task.config.goal {
        Some(_) => last
            .particles
            .iter()
            .zip(&last.costs)
            .any(|(p, q)| q.is_finite() && task.in_goal(&p.global)),
        None => true,
    };

    let mut states = Vec::with_capacity(cfg.horizon);
    let mut costs = Vec::with_capacity(cfg.horizon);
    let mut path_delta = Vec::with_capacity(cfg.horizon);
    for k in (1..=cfg.horizon).rev() {
        let st = &steps[k];
        states.push(st.particles[idx].clone());
        costs.push(st.costs[idx]);
        path_delta.push(st.delta[idx]);
        idx = st.psi[idx];
    }
    states.reverse();
    costs.reverse();
    path_delta.reverse();
    let poses = states.iter().map(|s| model.pose(&s.latent)).collect();

    Ok(Plan {
        start: start.clone(),
        states,
        poses,
        costs,
        delta: path_delta,
        log_posterior: best,
        diagnostics: diag,
        trellis: cfg.record_trellis.then_some(Trellis { steps }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::LinearGaussianDynamics;
    use crate::oracle::exact_trellis_viterbi;
    use crate::tasks::{CostFamily, Goal, Obstacle, Rect, TaskConfig};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    #[test]
    fn ess_examples() {
        assert_relative_eq!(ess(&[0.25; 4]), 4.0, epsilon = 1e-12);
        assert_eq!(ess(&[0.0, 1.0, 0.0]), 1.0);
        assert_relative_eq!(ess(&[0.5, 0.25, 0.25]), 1.0 / 0.375, epsilon = 1e-12);
    }

    #[test]
    fn systematic_resampling_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(systematic_resample(&[0.2; 5], &mut rng), vec![0, 1, 2, 3, 4]);
        assert_eq!(systematic_resample(&[0.0, 0.0, 1.0, 0.0], &mut rng), vec![2; 4]);
        for s in 0..100 {
            let u0 = 0.25 * s as f64 / 100.0;
            let idx = systematic_resample_with_offset(&[0.75, 0.25], 4, u0);
            assert_eq!(idx, vec![0, 0, 0, 1]);
        }
    }

    pub(crate) fn open_task(horizon: usize) -> Task {
        Task::new(TaskConfig {
            domain: Rect { min: [-1e3, -1e3], max: [1e3, 1e3] },
            obstacles: vec![],
            forbidden_strips: vec![],
            goal: None,
            cost: CostFamily::Heading {
                heading_weight: 0.0,
                target_heading: 0.0,
                lateral_weight: 0.0,
                target_x: 0.0,
                speed_weight: 1.0,
                target_speed: 0.0,
                speed_channel: 0,
            },
            horizon,
            resolution: 1.0,
            chain: None,
            start: None,
        })
        .unwrap()
    }

    fn toy(noise: f64) -> LinearGaussianDynamics {
        LinearGaussianDynamics::new(DMatrix::from_row_slice(2, 2, &[0.95, 0.1, -0.1, 0.95]), noise, 10.0)
    }

    fn start() -> AugmentedState {
        AugmentedState::new(DVector::from_vec(vec![1.0, -0.5]), Vector3::zeros())
    }

    #[test]
    fn single_particle_plan_is_the_rollout() {
        let model = toy(0.05);
        let task = open_task(6);
        let mut cfg = PlannerConfig::new(1, 6, 9);
        cfg.record_trellis = true;
        let p = plan(&model, &task, &start(), &cfg).unwrap();
        let mut expected = 0.0;
        let mut prev = start();
        for s in &p.states {
            expected += transition_log_density(&model, &prev, s, 0.1) - task.cost(&model.pose(&s.latent), &s.global, 0);
            prev = s.clone();
        }
        assert_relative_eq!(p.log_posterior, expected, epsilon = 1e-10);
        let tr = p.trellis.unwrap();
        for (k, s) in p.states.iter().enumerate() {
            assert_eq!(&tr.steps[k + 1].particles[0], s);
        }
    }

    #[test]
    fn deterministic_model_plans_the_mean_rollout() {
        let model = toy(0.0);
        let task = open_task(5);
        let p = plan(&model, &task, &start(), &PlannerConfig::new(20, 5, 1)).unwrap();
        let mut x = start().latent;
        for s in &p.states {
            x = &model.transition * x;
            assert_eq!(s.latent, x);
        }
        assert!(p.log_posterior.is_finite());
    }

    #[test]
    fn frozen_trellis_matches_exact_viterbi() {
        let model = toy(0.2);
        let task = open_task(7);
        let mut cfg = PlannerConfig::new(12, 7, 42);
        cfg.resample = false;
        cfg.record_trellis = true;
        let p = plan(&model, &task, &start(), &cfg).unwrap();
        let tr = p.trellis.as_ref().unwrap();
        let emissions: Vec<DVector<f64>> = tr
            .steps
            .iter()
            .map(|s| DVector::from_iterator(s.costs.len(), s.costs.iter().map(|q| -q)))
            .collect();
        let transitions: Vec<DMatrix<f64>> = tr
            .steps
            .windows(2)
            .map(|w| {
                DMatrix::from_fn(w[0].particles.len(), w[1].particles.len(), |j, i| {
                    transition_log_density(&model, &w[0].particles[j], &w[1].particles[i], 0.1)
                })
            })
            .collect();
        let (path, score) = exact_trellis_viterbi(&emissions, &transitions).unwrap();
        assert_eq!(score, p.log_posterior);
        for (k, &i) in path.iter().enumerate().skip(1) {
            assert_eq!(tr.steps[k].particles[i], p.states[k - 1]);
        }
    }

    #[test]
    fn identical_seeds_give_identical_plans() {
        let model = toy(0.1);
        let task = open_task(8);
        let cfg = PlannerConfig::new(30, 8, 5);
        assert_eq!(plan(&model, &task, &start(), &cfg).unwrap(), plan(&model, &task, &start(), &cfg).unwrap());
    }

    #[test]
    fn trellis_pointers_and_path_are_consistent() {
        let model = toy(0.3);
        let task = open_task(10);
        let mut cfg = PlannerConfig::new(25, 10, 8);
        cfg.record_trellis = true;
        let p = plan(&model, &task, &start(), &cfg).unwrap();
        let tr = p.trellis.as_ref().unwrap();
        for k in 1..tr.steps.len() {
            let prev_len = tr.steps[k - 1].particles.len();
            assert!(tr.steps[k].psi.iter().all(|&j| j < prev_len));
            assert_relative_eq!(tr.steps[k].weights.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
        let mut prev = start();
        for (s, q) in p.states.iter().zip(&p.costs) {
            assert!(transition_log_density(&model, &prev, s, 0.1).is_finite());
            assert!(q.is_finite());
            prev = s.clone();
        }
        // delta never exceeds the best previous score plus the largest transition log-density
        let max_logp = -(2.0 * std::f64::consts::PI * 0.3f64).ln();
        for k in 1..tr.steps.len() {
            let prev_best = tr.steps[k - 1].delta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(tr.steps[k].delta.iter().all(|&d| d <= prev_best + max_logp + 1e-12));
        }
        assert_eq!(p.diagnostics.dp_operations, (25 + 25 * 25 * 9) as u64);
    }

    #[test]
    fn all_particles_in_collision_is_degenerate() {
        let model = toy(0.01);
        let mut task = open_task(3);
        task.config.obstacles = vec![Obstacle::Circle { center: [0.0, 0.0], radius: 5.0 }];
        task = Task::new(task.config).unwrap();
        let r = plan(&model, &task, &start(), &PlannerConfig::new(4, 3, 0));
        assert!(matches!(r, Err(Error::DegenerateWeights { step: 1 })));
    }

    #[test]
    fn rejects_bad_config() {
        let model = toy(0.1);
        let task = open_task(3);
        assert!(plan(&model, &task, &start(), &PlannerConfig::new(0, 3, 0)).is_err());
        let mut cfg = PlannerConfig::new(3, 3, 0);
        cfg.guidance = Some(ControlSequence::zeros(2, 2));
        assert!(plan(&model, &task, &start(), &cfg).is_err());
        let _ = Goal { center: [0.0, 0.0], radius: 1.0 };
    }
}

//! Path-integral guidance computed coarse-to-fine over time-aggregated
//! versions of the latent dynamics.
//!
//! A level with aggregation factor `M` steps the dynamics `M` frames at a
//! time with `M`-fold drift and variance. At each level a particle filter
//! samples noise histories, weights them by `exp(-M q)`, and the weighted
//! average noise becomes the control correction handed to the next finer
//! level. Controls are kept at full horizon length throughout.

use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{global_step, AugmentedState, LatentDynamics};
use crate::error::{Error, Result};
use crate::planner::{ess, systematic_resample};
use crate::tasks::Task;

/// Per-step latent controls `u_k`, k = 0..K-1, in noise standard deviations per second.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSequence {
    pub controls: Vec<DVector<f64>>,
}

impl ControlSequence {
    pub fn zeros(horizon: usize, dim: usize) -> Self {
        Self {
            controls: vec![DVector::zeros(dim); horizon],
        }
    }

    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.controls.first().map_or(0, |u| u.len())
    }

    /// Every `m`-th control.
    pub fn subsample(&self, m: usize) -> Self {
        Self {
            controls: self.controls.iter().step_by(m).cloned().collect(),
        }
    }

    /// Each control repeated `m` times.
    pub fn stretch(&self, m: usize) -> Self {
        Self {
            controls: self.controls.iter().flat_map(|u| std::iter::repeat_n(u.clone(), m)).collect(),
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let header: Vec<String> = (0..self.dim()).map(|j| format!("u{j}")).collect();
        out.write_record(&header).map_err(csv_err)?;
        for u in &self.controls {
            out.write_record(u.iter().map(|v| format!("{v:?}"))).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut controls = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i as u64 + 2;
            let rec = rec.map_err(|e| Error::Parse { line, message: e.to_string() })?;
            let vals: std::result::Result<Vec<f64>, _> = rec.iter().map(|s| s.trim().parse::<f64>()).collect();
            let vals = vals.map_err(|e| Error::Parse { line, message: e.to_string() })?;
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parse { line, message: "non-finite control".into() });
            }
            controls.push(DVector::from_vec(vals));
        }
        let seq = Self { controls };
        if seq.controls.iter().any(|u| u.len() != seq.dim()) {
            return Err(Error::invalid("control rows differ in length"));
        }
        Ok(seq)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Level {
    /// Aggregation factor `M`.
    pub factor: usize,
    pub particles: usize,
}

/// Levels from coarsest to finest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct LevelSchedule {
    pub levels: Vec<Level>,
}

impl LevelSchedule {
    pub fn validate(&self, horizon: usize) -> Result<()> {
        for l in &self.levels {
            if l.factor == 0 || l.particles == 0 {
                return Err(Error::InvalidSchedule("factors and particle counts must be positive".into()));
            }
            if horizon % l.factor != 0 {
                return Err(Error::InvalidSchedule(format!("factor {} does not divide horizon {horizon}", l.factor)));
            }
        }
        if self.levels.windows(2).any(|w| w[0].factor <= w[1].factor) {
            return Err(Error::InvalidSchedule("factors must strictly decrease from coarse to fine".into()));
        }
        Ok(())
    }
}

impl FromStr for LevelSchedule {
    type Err = Error;

    /// `"8:200,4:400,2:800"`; levels may be listed in any order and are
    /// sorted coarsest first.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidSchedule(format!("expected M:N,M:N,... got {s:?}"));
        let levels = s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| {
                let (m, n) = p.trim().split_once(':').ok_or_else(bad)?;
                Ok(Level {
                    factor: m.trim().parse().map_err(|_| bad())?,
                    particles: n.trim().parse().map_err(|_| bad())?,
                })
            })
            .collect::<Result<Vec<Level>>>()?;
        let mut levels = levels;
        levels.sort_by(|a, b| b.factor.cmp(&a.factor));
        Ok(Self { levels })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PiOptions {
    /// Time step in seconds; `None` uses the model's frame period.
    pub step: Option<f64>,
    /// Divide the weighted noise average by the particle count as well.
    pub literal_normalization: bool,
    pub resample_threshold: f64,
    /// Correct the weights for sampling under the guidance control
    /// (`exp(-d.w - |d|^2/2)` per step, `d = sqrt(M) u h`). Off weights by cost only.
    pub guidance_correction: bool,
}

impl Default for PiOptions {
    fn default() -> Self {
        Self {
            step: None,
            literal_normalization: false,
            resample_threshold: 0.5,
            guidance_correction: true,
        }
    }
}

/// Mean and per-dimension variance of one aggregated step of `M` frames
/// under control `u`. Phase dimensions follow the mean dynamics composed `M` times.
pub fn level_step<M: LatentDynamics + ?Sized>(model: &M, x: &DVector<f64>, u: &DVector<f64>, m: usize, h: f64) -> (DVector<f64>, f64) {
    let (mu, var) = model.step(x);
    let var = var.max(0.0);
    let sd = var.sqrt();
    let noisy = model.noisy_mask();
    let mf = m as f64;
    let mut mean = if m == 1 {
        mu.clone()
    } else {
        x + (&mu - x) * mf
    };
    for (d, &on) in noisy.iter().enumerate() {
        if on {
            mean[d] += mf * sd * u[d] * h;
        }
    }
    if m > 1 && noisy.iter().any(|on| !on) {
        let mut composed = mu;
        for _ in 1..m {
            composed = model.step_mean(&composed);
        }
        for (d, &on) in noisy.iter().enumerate() {
            if !on {
                mean[d] = composed[d];
            }
        }
    }
    (mean, mf * var)
}

pub fn level_step_mean<M: LatentDynamics + ?Sized>(model: &M, x: &DVector<f64>, u: &DVector<f64>, m: usize, h: f64) -> DVector<f64> {
    level_step(model, x, u, m, h).0
}

/// Particle paths of one level, kept for inspection.
#[derive(Debug, Clone)]
pub struct LevelRun {
    /// `states[i][k]`, k = 0..=K_l
    pub states: Vec<Vec<AugmentedState>>,
    /// Latent noises `latent_noise[i][k]`, k = 0..K_l-1 (zero on phase dimensions).
    pub latent_noise: Vec<Vec<DVector<f64>>>,
    pub global_noise: Vec<Vec<[f64; 3]>>,
    /// Normalized final weights.
    pub weights: Vec<f64>,
    /// The level's controls at length `K_l`.
    pub controls: ControlSequence,
    pub resample_steps: Vec<usize>,
}

fn level_rng(seed: u64, step: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((step as u64) << 32) | index as u64);
    rng
}

/// One aggregated transition driven by explicit noises.
pub fn level_transition<M: LatentDynamics + ?Sized>(
    model: &M,
    state: &AugmentedState,
    u: &DVector<f64>,
    m: usize,
    h: f64,
    latent_noise: &DVector<f64>,
    global_noise: [f64; 3],
) -> AugmentedState {
    let (mean, var) = level_step(model, &state.latent, u, m, h);
    let latent = mean + latent_noise * var.sqrt();
    let global = match model.velocity_channels() {
        Some(c) => {
            let (pose, pose_var) = model.pose_with_variance(&state.latent);
            global_step(&state.global, &pose, [pose_var.max(0.0) / m as f64; 3], global_noise, c, m as f64 * h)
        }
        None => state.global,
    };
    AugmentedState::new(latent, global)
}

/// Runs the particle filter of one level and returns the sampled paths.
pub fn run_level<M: LatentDynamics + ?Sized>(
    model: &M,
    task: &Task,
    start: &AugmentedState,
    u_upper: &ControlSequence,
    level: Level,
    seed: u64,
    opts: &PiOptions,
) -> Result<LevelRun> {
    let m = level.factor;
    let n = level.particles;
    if m == 0 || n == 0 || u_upper.len() % m != 0 {
        return Err(Error::InvalidSchedule(format!("factor {m} does not divide horizon {}", u_upper.len())));
    }
    let h = opts.step.unwrap_or(1.0 / model.frame_rate());
    let u_sub = u_upper.subsample(m);
    let kl = u_sub.len();
    let d = model.latent_dim();
    let noisy = model.noisy_mask();

    let mut states: Vec<Vec<AugmentedState>> = vec![vec![start.clone()]; n];
    let mut latent_noise: Vec<Vec<DVector<f64>>> = vec![Vec::with_capacity(kl); n];
    let mut global_noise: Vec<Vec<[f64; 3]>> = vec![Vec::with_capacity(kl); n];
    let mut log_w = vec![0.0; n];
    let mut resample_steps = Vec::new();

    for k in 0..kl {
        let stepped: Vec<(AugmentedState, DVector<f64>, [f64; 3], f64)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = level_rng(seed, k + 1, i);
                let wl = DVector::from_fn(d, |j, _| if noisy[j] { StandardNormal.sample(&mut rng) } else { 0.0 });
                let wg: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
                let prev = states[i].last().expect("start state");
                let next = level_transition(model, prev, &u_sub.controls[k], m, h, &wl, wg);
                let q = task.cost(&model.pose(&next.latent), &next.global, (k + 1) * m);
                (next, wl, wg, q)
            })
            .collect();
        let shift: DVector<f64> = &u_sub.controls[k] * ((m as f64).sqrt() * h);
        let shift = DVector::from_fn(d, |j, _| if noisy[j] { shift[j] } else { 0.0 });
        for (i, (s, wl, wg, q)) in stepped.into_iter().enumerate() {
            log_w[i] -= m as f64 * q;
            if opts.guidance_correction {
                log_w[i] -= shift.dot(&wl) + 0.5 * shift.norm_squared();
            }
            states[i].push(s);
            latent_noise[i].push(wl);
            global_noise[i].push(wg);
        }
        let max_lw = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max_lw == f64::NEG_INFINITY {
            return Err(Error::DegenerateWeights { step: (k + 1) * m });
        }
        let w: Vec<f64> = log_w.iter().map(|v| (v - max_lw).exp()).collect();
        let total: f64 = w.iter().sum();
        let w: Vec<f64> = w.iter().map(|v| v / total).collect();
        if k + 1 < kl && ess(&w) < opts.resample_threshold * n as f64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((((k + 1) as u64) << 32) | 0xFFFF_FFFF);
            let idx = systematic_resample(&w, &mut rng);
            states = idx.iter().map(|&i| states[i].clone()).collect();
            latent_noise = idx.iter().map(|&i| latent_noise[i].clone()).collect();
            global_noise = idx.iter().map(|&i| global_noise[i].clone()).collect();
            log_w = vec![0.0; n];
            resample_steps.push(k + 1);
        } else {
            log_w = w.iter().map(|v| v.ln()).collect();
        }
    }

    let max_lw = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|v| (v - max_lw).exp()).collect();
    let total: f64 = w.iter().sum();
    let weights: Vec<f64> = w.iter().map(|v| v / total).collect();

    let mf = m as f64;
    let scale = mf.sqrt() / (h * mf) / if opts.literal_normalization { n as f64 } else { 1.0 };
    let controls = (0..kl)
        .map(|k| {
            let mut u = u_sub.controls[k].clone();
            for (wi, noise) in weights.iter().zip(&latent_noise) {
                u += &noise[k] * (wi * scale);
            }
            u
        })
        .collect();
    Ok(LevelRun {
        states,
        latent_noise,
        global_noise,
        weights,
        controls: ControlSequence { controls },
        resample_steps,
    })
}

/// One path-integral update at a single level; returns controls stretched back to length K.
pub fn pi_level<M: LatentDynamics + ?Sized>(
    model: &M,
    task: &Task,
    start: &AugmentedState,
    u_upper: &ControlSequence,
    level: Level,
    seed: u64,
    opts: &PiOptions,
) -> Result<ControlSequence> {
    Ok(run_level(model, task, start, u_upper, level, seed, opts)?.controls.stretch(level.factor))
}

/// Guidance controls from the coarsest level down to the finest. An empty
/// schedule yields zero control; a level whose particles all collide leaves
/// the control it received unchanged.
pub fn cascade<M: LatentDynamics + ?Sized>(
    model: &M,
    task: &Task,
    start: &AugmentedState,
    schedule: &LevelSchedule,
    seed: u64,
    opts: &PiOptions,
) -> Result<ControlSequence> {
    let k = task.horizon();
    schedule.validate(k)?;
    let mut u = ControlSequence::zeros(k, model.latent_dim());
    for (l, level) in schedule.levels.iter().enumerate() {
        match pi_level(model, task, start, &u, *level, seed.wrapping_add(l as u64 * 0x9E37_79B9), opts) {
            Ok(next) => u = next,
            // every particle of this level collided: keep the coarser answer
            Err(Error::DegenerateWeights { step }) => {
                log::warn!("level M={} degenerate at step {step}; passing its guidance through", level.factor);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(u)
}

/// `KL(N(m0, S0) || N(m1, S1))`.
pub fn gaussian_kl(m0: &DVector<f64>, s0: &DMatrix<f64>, m1: &DVector<f64>, s1: &DMatrix<f64>) -> Result<f64> {
    let k = m0.len() as f64;
    let c1 = s1.clone().cholesky().ok_or_else(|| Error::FactorizationFailure("KL covariance".into()))?;
    let c0 = s0.clone().cholesky().ok_or_else(|| Error::FactorizationFailure("KL covariance".into()))?;
    let diff = m1 - m0;
    let trace = c1.solve(s0).trace();
    let maha = diff.dot(&c1.solve(&diff));
    let ld1 = 2.0 * c1.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let ld0 = 2.0 * c0.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(0.5 * (trace + maha - k + ld1 - ld0))
}

/// Start state helper for callers without a global frame.
pub fn latent_start(latent: DVector<f64>) -> AugmentedState {
    AugmentedState::new(latent, Vector3::zeros())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{latent_step_distribution, LinearGaussianDynamics};
    use crate::lvm::LatentRole;
    use crate::tasks::{CostFamily, Rect, TaskConfig};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn quad_task(horizon: usize, weight: f64) -> Task {
        Task::new(TaskConfig {
            domain: Rect { min: [-1.0, -1.0], max: [1.0, 1.0] },
            obstacles: vec![],
            forbidden_strips: vec![],
            goal: None,
            cost: CostFamily::Heading {
                heading_weight: 0.0,
                target_heading: 0.0,
                lateral_weight: 0.0,
                target_x: 0.0,
                speed_weight: weight,
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

    fn toy2() -> LinearGaussianDynamics {
        LinearGaussianDynamics::new(DMatrix::from_row_slice(2, 2, &[0.97, 0.05, -0.04, 0.98]), 0.02, 10.0)
    }

    #[test]
    fn unit_factor_reduces_to_one_step() {
        let model = toy2();
        let x = DVector::from_vec(vec![0.3, -1.2]);
        let zero = DVector::zeros(2);
        assert_eq!(level_step_mean(&model, &x, &zero, 1, 0.1), latent_step_distribution(&model, &x).0);
        let (_, var) = level_step(&model, &x, &zero, 1, 0.1);
        assert_eq!(var, 0.02);
    }

    #[test]
    fn uncontrolled_aggregated_step() {
        let model = toy2();
        let x = DVector::from_vec(vec![0.3, -1.2]);
        let mu = &model.transition * &x;
        for m in [2, 4, 8] {
            let (mean, var) = level_step(&model, &x, &DVector::zeros(2), m, 0.1);
            assert!((mean - (&x + (&mu - &x) * m as f64)).abs().max() < 1e-14);
            assert_relative_eq!(var, m as f64 * 0.02, epsilon = 1e-15);
        }
    }

    #[test]
    fn aggregation_error_is_second_order() {
        let x = DVector::from_vec(vec![1.0, -0.5]);
        let mut ratios = Vec::new();
        for eps in [0.1, 0.05, 0.025] {
            let b = DMatrix::from_row_slice(2, 2, &[-1.0, 0.4, -0.3, -0.8]);
            let a = DMatrix::identity(2, 2) + &b * eps;
            let model = LinearGaussianDynamics::new(a.clone(), 0.01, 10.0);
            let two = &a * (&a * &x);
            let one = level_step_mean(&model, &x, &DVector::zeros(2), 2, 0.1);
            let err = (two - one).norm();
            let bound = (&b * &b * &x).norm() * eps * eps;
            assert!(err <= bound + 1e-14);
            ratios.push(err / (eps * eps));
        }
        assert_relative_eq!(ratios[0], ratios[2], max_relative = 1e-9);
    }

    #[test]
    fn phase_dimensions_compose_the_mean() {
        let mut model = toy2();
        model.roles = vec![LatentRole::Free, LatentRole::PeriodicPhase];
        let x = DVector::from_vec(vec![0.3, -1.2]);
        let mean = level_step_mean(&model, &x, &DVector::from_vec(vec![1.0, 5.0]), 3, 0.1);
        let composed = &model.transition * (&model.transition * (&model.transition * &x));
        assert_relative_eq!(mean[1], composed[1], epsilon = 1e-15);
    }

    #[test]
    fn zero_cost_keeps_the_upper_control_on_average() {
        let model = toy2();
        let task = quad_task(16, 0.0);
        let start = latent_start(DVector::from_vec(vec![0.5, 0.5]));
        let u_upper = ControlSequence { controls: vec![DVector::from_vec(vec![0.3, -0.2]); 16] };
        for (m, n) in [(1usize, 400usize), (4, 200)] {
            // unit step: the bound below is then three standard deviations of the noise average
            let opts = PiOptions { step: Some(1.0), guidance_correction: false, ..PiOptions::default() };
            let run = run_level(&model, &task, &start, &u_upper, Level { factor: m, particles: n }, 17, &opts).unwrap();
            assert!(run.weights.iter().all(|w| (w - 1.0 / n as f64).abs() < 1e-15));
            assert!(run.resample_steps.is_empty());
            let h = 1.0;
            let bound = 3.0 * (h * m as f64 * n as f64).powf(-0.5) * (m as f64).sqrt();
            for u in &run.controls.controls {
                assert!((u - &u_upper.controls[0]).amax() <= bound);
            }
        }
    }

    #[test]
    fn zero_cost_from_passive_start_keeps_uniform_weights() {
        let model = toy2();
        let task = quad_task(16, 0.0);
        let start = latent_start(DVector::from_vec(vec![0.5, 0.5]));
        let opts = PiOptions { step: Some(1.0), ..PiOptions::default() };
        let run = run_level(&model, &task, &start, &ControlSequence::zeros(16, 2), Level { factor: 2, particles: 300 }, 5, &opts).unwrap();
        assert!(run.weights.iter().all(|w| (w - 1.0 / 300.0).abs() < 1e-15));
        let bound = 3.0 * (2.0 * 300.0f64).powf(-0.5) * 2f64.sqrt();
        assert!(run.controls.controls.iter().all(|u| u.amax() <= bound));
    }

    #[test]
    fn corrected_weights_pull_free_guidance_back_to_passive() {
        // with zero cost the passive dynamics are optimal, so a guided proposal
        // should be steered back toward zero control
        let model = toy2();
        let task = quad_task(8, 0.0);
        let start = latent_start(DVector::from_vec(vec![0.0, 0.0]));
        let u_upper = ControlSequence { controls: vec![DVector::from_vec(vec![0.3, -0.2]); 8] };
        let opts = PiOptions { step: Some(1.0), resample_threshold: 0.0, ..PiOptions::default() };
        let run = run_level(&model, &task, &start, &u_upper, Level { factor: 1, particles: 4000 }, 9, &opts).unwrap();
        for u in &run.controls.controls {
            assert!(u.amax() < 0.1, "{u}");
        }
    }

    #[test]
    fn single_particle_update_is_its_rescaled_noise() {
        let model = toy2();
        let task = quad_task(8, 1.0);
        let start = latent_start(DVector::from_vec(vec![0.2, 0.1]));
        let u0 = ControlSequence::zeros(8, 2);
        let run = run_level(&model, &task, &start, &u0, Level { factor: 2, particles: 1 }, 3, &PiOptions::default()).unwrap();
        for (k, u) in run.controls.controls.iter().enumerate() {
            let expected = &run.latent_noise[0][k] * (2f64.sqrt() / (0.1 * 2.0));
            assert!((u - expected).amax() < 1e-15);
        }
    }

    #[test]
    fn resampled_paths_replay_from_their_noises() {
        let model = toy2();
        let task = quad_task(20, 5.0);
        let start = latent_start(DVector::from_vec(vec![1.5, -1.0]));
        let u0 = ControlSequence::zeros(20, 2);
        let level = Level { factor: 2, particles: 64 };
        let run = run_level(&model, &task, &start, &u0, level, 5, &PiOptions::default()).unwrap();
        assert!(!run.resample_steps.is_empty());
        let u = u0.subsample(2);
        for i in 0..64 {
            let mut s = start.clone();
            for k in 0..10 {
                s = level_transition(&model, &s, &u.controls[k], 2, 0.1, &run.latent_noise[i][k], run.global_noise[i][k]);
                assert!((&s.latent - &run.states[i][k + 1].latent).amax() < 1e-10);
            }
        }
    }

    #[test]
    fn stretch_and_subsample_round_trip() {
        let u = ControlSequence { controls: (0..4).map(|k| DVector::from_vec(vec![k as f64])).collect() };
        let s = u.stretch(3);
        assert_eq!(s.len(), 12);
        assert_eq!(s.subsample(3), u);
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        assert_eq!(ControlSequence::read_csv(&buf[..]).unwrap(), s);
    }

    #[test]
    fn schedule_parsing_and_validation() {
        let s: LevelSchedule = "8:200, 4:400,2:800".parse().unwrap();
        assert_eq!(s.levels[1], Level { factor: 4, particles: 400 });
        assert!(s.validate(64).is_ok());
        assert!(matches!(s.validate(36), Err(Error::InvalidSchedule(_))));
        let fine_first: LevelSchedule = "2:200,4:400,8:800".parse().unwrap();
        assert_eq!(fine_first.levels[0], Level { factor: 8, particles: 800 });
        assert!(fine_first.validate(64).is_ok());
        let bad: LevelSchedule = "4:10,4:20".parse().unwrap();
        assert!(bad.validate(8).is_err());
        let direct = LevelSchedule { levels: vec![Level { factor: 2, particles: 1 }, Level { factor: 4, particles: 1 }] };
        assert!(direct.validate(8).is_err());
        assert!("4-10".parse::<LevelSchedule>().is_err());
    }

    #[test]
    fn empty_schedule_gives_zero_control() {
        let model = toy2();
        let task = quad_task(6, 1.0);
        let u = cascade(&model, &task, &latent_start(DVector::zeros(2)), &LevelSchedule::default(), 0, &PiOptions::default()).unwrap();
        assert_eq!(u, ControlSequence::zeros(6, 2));
    }

    #[test]
    fn kl_of_equal_covariance_steps_is_quadratic_control_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let d = 3;
            let b = DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { 0.0 } + 0.3 * rng.random_range(-1.0..1.0));
            let u = DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0));
            let h: f64 = rng.random_range(0.01..0.5);
            let mean = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
            let cov = &b * b.transpose() * h;
            let kl = gaussian_kl(&(&mean + &b * &u * h), &cov, &mean, &cov).unwrap();
            assert_relative_eq!(kl, 0.5 * h * u.norm_squared(), max_relative = 1e-9);
        }
    }
}

//! Synthetic locomotion-like datasets with a known latent path.
//!
//! A low-dimensional oracle path (a limit cycle, optionally with a slowly
//! varying turn coordinate) is lifted to joint-angle channels by a fixed,
//! seeded sum of sinusoids. Three velocity channels describe a planar path
//! consistent with the gait: forward speed, zero lateral speed, and a yaw
//! rate equal to the turn coordinate.

use std::f64::consts::{PI, TAU};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{MotionDataset, VELOCITY_CHANNEL_NAMES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleKind {
    Circle,
    Lissajous,
    /// Two cycles (slow then fast) joined by a transition segment.
    TwoGait,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub kind: OracleKind,
    /// Observation dimension: 3 velocity channels plus `D - 3` joint channels.
    pub dim: usize,
    pub noise_std: f64,
    pub frames_per_cycle: usize,
    pub cycles: usize,
    /// Peak yaw rate (rad/s) of the slow turn modulation; 0 walks straight.
    pub turn_amplitude: f64,
    pub seed: u64,
    pub frame_rate: f64,
    /// Mean forward speed (m/s) of the first gait.
    pub speed: f64,
}

impl GeneratorSpec {
    pub fn new(kind: OracleKind, dim: usize) -> Self {
        Self {
            kind,
            dim,
            noise_std: 0.0,
            frames_per_cycle: 30,
            cycles: 4,
            turn_amplitude: 0.0,
            seed: 0,
            frame_rate: 30.0,
            speed: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dim < 4 {
            return Err(Error::invalid("observation dim must be at least 4"));
        }
        if self.frames_per_cycle < 4 || self.cycles == 0 {
            return Err(Error::invalid("need at least 4 frames per cycle and one cycle"));
        }
        if !(self.noise_std >= 0.0) || !(self.frame_rate > 0.0) || !(self.speed >= 0.0) {
            return Err(Error::invalid("noise, frame rate and speed must be non-negative"));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        2 + usize::from(self.turn_amplitude != 0.0)
    }
}

/// A generated dataset and its ground truth.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub dataset: MotionDataset,
    /// Oracle latent path, N x (2 or 3).
    pub latent: DMatrix<f64>,
    /// Gait index per frame (always 0 except for the two-gait oracle).
    pub labels: Vec<usize>,
}

struct Lift {
    /// per joint: (frequency vector, offset, amplitude) terms
    terms: Vec<Vec<(Vec<f64>, f64, f64)>>,
    linear: Vec<Vec<f64>>,
}

impl Lift {
    fn new(joints: usize, inputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, 0.6).expect("valid std");
        let terms = (0..joints)
            .map(|_| {
                (0..3)
                    .map(|_| {
                        let w: Vec<f64> = (0..inputs).map(|_| normal.sample(rng)).collect();
                        (w, rng.random_range(0.0..TAU), rng.random_range(0.5..1.0))
                    })
                    .collect()
            })
            .collect();
        let linear = (0..joints).map(|_| (0..inputs).map(|_| normal.sample(rng)).collect()).collect();
        Self { terms, linear }
    }

    fn eval(&self, j: usize, z: &[f64]) -> f64 {
        let dot = |w: &[f64]| w.iter().zip(z).map(|(a, b)| a * b).sum::<f64>();
        self.terms[j].iter().map(|(w, b, a)| a * (dot(w) + b).sin()).sum::<f64>() + 0.5 * dot(&self.linear[j])
    }
}

/// Generates the dataset described by `spec`.
pub fn generate(spec: &GeneratorSpec) -> Result<SynthData> {
    spec.validate()?;
    let fpc = spec.frames_per_cycle;
    let step = TAU / fpc as f64;

    // oracle path: (z1, z2, phase, gait, speed factor)
    let mut path: Vec<([f64; 2], f64, usize, f64)> = Vec::new();
    match spec.kind {
        OracleKind::Circle | OracleKind::Lissajous => {
            for t in 0..spec.cycles * fpc {
                let phi = t as f64 * step;
                let z = match spec.kind {
                    OracleKind::Circle => [phi.cos(), phi.sin()],
                    _ => [phi.cos(), (2.0 * phi).sin()],
                };
                path.push((z, phi, 0, 1.0));
            }
        }
        OracleKind::TwoGait => {
            let centers = [-2.0, 2.0];
            for t in 0..spec.cycles * fpc {
                let phi = t as f64 * step;
                path.push(([centers[0] + phi.cos(), phi.sin()], phi, 0, 1.0));
            }
            // straight transition from the end of gait A to the start of gait B
            let n_tr = (fpc / 2).max(2);
            let from = [centers[0] + 1.0, 0.0];
            let to = [centers[1] - 1.0, 0.0];
            for t in 0..n_tr {
                let s = (t + 1) as f64 / (n_tr + 1) as f64;
                let z = [from[0] + s * (to[0] - from[0]), 0.0];
                path.push((z, 0.0, usize::from(s > 0.5), 1.0 + s));
            }
            for t in 0..spec.cycles * fpc {
                // gait B starts at its leftmost point and turns the same way
                let phi = PI + t as f64 * step;
                path.push(([centers[1] + phi.cos(), -phi.sin()], phi, 1, 2.0));
            }
        }
    }

    let n = path.len();
    let turning = spec.turn_amplitude != 0.0;
    let tau: Vec<f64> = (0..n)
        .map(|t| if turning { spec.turn_amplitude * (TAU * t as f64 / n as f64).sin() } else { 0.0 })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let inputs = spec.latent_dim();
    let joints = spec.dim - 3;
    let lift = Lift::new(joints, inputs, &mut rng);

    let latent = DMatrix::from_fn(n, inputs, |t, j| if j < 2 { path[t].0[j] } else { tau[t] });
    let mut y = DMatrix::zeros(n, spec.dim);
    for t in 0..n {
        let (_, phi, _, factor) = path[t];
        y[(t, 0)] = spec.speed * factor * (1.0 + 0.1 * (2.0 * phi).cos());
        y[(t, 1)] = 0.0;
        y[(t, 2)] = tau[t];
        let z: Vec<f64> = latent.row(t).iter().copied().collect();
        for j in 0..joints {
            y[(t, 3 + j)] = lift.eval(j, &z);
        }
    }
    for j in 0..joints {
        let col = y.column(3 + j);
        let peak = col.amax();
        if peak > 0.0 {
            y.column_mut(3 + j).scale_mut(0.8 / peak);
        }
    }
    if spec.noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.noise_std).expect("valid std");
        y.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }

    let names: Vec<String> = VELOCITY_CHANNEL_NAMES
        .iter()
        .map(|s| s.to_string())
        .chain((0..joints).map(|j| format!("joint_{j}")))
        .collect();
    let phase = path.iter().map(|p| p.1.rem_euclid(TAU)).collect();
    let labels = path.iter().map(|p| p.2).collect();
    let dataset = MotionDataset::with_names(y, vec![0], Some(phase), spec.frame_rate, names)?;
    Ok(SynthData { dataset, latent, labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::global_step;
    use nalgebra::{DVector, Vector3};

    #[test]
    fn noiseless_circle_is_periodic() {
        let mut spec = GeneratorSpec::new(OracleKind::Circle, 8);
        spec.frames_per_cycle = 20;
        let out = generate(&spec).unwrap();
        let y = &out.dataset.observations;
        for t in 0..y.nrows() - 20 {
            assert!((y.row(t) - y.row(t + 20)).amax() < 1e-12);
        }
        assert!(y.column(1).iter().all(|v| *v == 0.0));
        assert_eq!(out.dataset.velocity_channels().unwrap().indices(), [0, 1, 2]);
    }

    #[test]
    fn straight_walk_without_yaw() {
        let spec = GeneratorSpec::new(OracleKind::Circle, 6);
        let out = generate(&spec).unwrap();
        let ch = out.dataset.velocity_channels().unwrap();
        let mut g = Vector3::new(0.0, 0.0, 0.4);
        for row in out.dataset.observations.row_iter() {
            let y = DVector::from_iterator(6, row.iter().copied());
            g = global_step(&g, &y, [0.0; 3], [0.0; 3], ch, 1.0 / 30.0);
            // on the line through the origin with heading 0.4
            assert!((g[1] * 0.4f64.cos() - g[0] * 0.4f64.sin()).abs() < 1e-12);
            assert_eq!(g[2], 0.4);
        }
    }

    #[test]
    fn turn_modulation_adds_a_latent_dimension() {
        let mut spec = GeneratorSpec::new(OracleKind::Circle, 6);
        spec.turn_amplitude = 0.5;
        let out = generate(&spec).unwrap();
        assert_eq!(out.latent.ncols(), 3);
        let yaw = out.dataset.observations.column(2);
        assert!((yaw.max() - 0.5).abs() < 0.01 && (yaw.min() + 0.5).abs() < 0.01);
    }

    #[test]
    fn deterministic_per_seed() {
        let mut spec = GeneratorSpec::new(OracleKind::Lissajous, 10);
        spec.noise_std = 0.05;
        spec.seed = 4;
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.dataset, b.dataset);
        spec.seed = 5;
        assert_ne!(generate(&spec).unwrap().dataset.observations, a.dataset.observations);
    }

    fn silhouette(y: &DMatrix<f64>, labels: &[usize]) -> f64 {
        let n = y.nrows();
        let d = |i: usize, j: usize| (y.row(i) - y.row(j)).norm();
        let mut total = 0.0;
        for i in 0..n {
            let mut sums = [0.0; 2];
            let mut counts = [0usize; 2];
            for j in 0..n {
                if j != i {
                    sums[labels[j]] += d(i, j);
                    counts[labels[j]] += 1;
                }
            }
            let own = labels[i];
            let a = sums[own] / counts[own] as f64;
            let b = sums[1 - own] / counts[1 - own] as f64;
            total += (b - a) / a.max(b);
        }
        total / n as f64
    }

    #[test]
    fn two_gaits_form_two_clusters() {
        let mut spec = GeneratorSpec::new(OracleKind::TwoGait, 12);
        spec.noise_std = 0.02;
        let out = generate(&spec).unwrap();
        let s = silhouette(&out.dataset.observations, &out.labels);
        assert!(s >= 0.4, "silhouette {s}");
    }

    #[test]
    fn rejects_too_few_channels() {
        assert!(generate(&GeneratorSpec::new(OracleKind::Circle, 3)).is_err());
    }
}

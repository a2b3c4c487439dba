//! The generative system the planner runs on: stochastic latent steps, pose
//! decoding and planar global-frame integration.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::lvm::{LatentModel, LatentRole};

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    if theta > -PI && theta <= PI {
        return theta;
    }
    let w = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// Indices of the forward velocity (m/s), lateral velocity (m/s) and yaw
/// rate (rad/s) channels of a pose vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VelocityChannels {
    forward: usize,
    lateral: usize,
    yaw: usize,
}

impl VelocityChannels {
    pub fn new(indices: [usize; 3], pose_dim: usize) -> Result<Self> {
        let [forward, lateral, yaw] = indices;
        if forward == lateral || forward == yaw || lateral == yaw {
            return Err(Error::invalid("velocity channel indices must be distinct"));
        }
        if indices.iter().any(|&i| i >= pose_dim) {
            return Err(Error::invalid("velocity channel index out of range"));
        }
        Ok(Self { forward, lateral, yaw })
    }

    pub fn indices(&self) -> [usize; 3] {
        [self.forward, self.lateral, self.yaw]
    }

    pub fn forward(&self) -> usize {
        self.forward
    }

    pub fn read(&self, y: &DVector<f64>) -> [f64; 3] {
        [y[self.forward], y[self.lateral], y[self.yaw]]
    }
}

/// Latent point plus planar pose `(x m, y m, heading rad)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    pub latent: DVector<f64>,
    pub global: Vector3<f64>,
}

impl AugmentedState {
    pub fn new(latent: DVector<f64>, global: Vector3<f64>) -> Self {
        let mut global = global;
        global[2] = wrap_angle(global[2]);
        Self { latent, global }
    }
}

/// What the planner needs from a latent model. Implemented by the trained
/// [`LatentModel`] and by [`LinearGaussianDynamics`] for analytic checks.
pub trait LatentDynamics: Sync {
    fn latent_dim(&self) -> usize;
    fn pose_dim(&self) -> usize;
    /// Mean of the next latent point and the scalar per-dimension variance.
    fn step(&self, x: &DVector<f64>) -> (DVector<f64>, f64);
    /// Mean of the next latent point only.
    fn step_mean(&self, x: &DVector<f64>) -> DVector<f64> {
        self.step(x).0
    }
    /// Noise-free decoded pose, in data units.
    fn pose(&self, x: &DVector<f64>) -> DVector<f64>;
    /// Decoded pose and its scalar per-channel variance.
    fn pose_with_variance(&self, x: &DVector<f64>) -> (DVector<f64>, f64);
    fn roles(&self) -> &[LatentRole];
    fn velocity_channels(&self) -> Option<VelocityChannels>;
    /// Frames per second of the training data; the planner's default step is its inverse.
    fn frame_rate(&self) -> f64;

    /// `true` for dimensions that receive process noise.
    fn noisy_mask(&self) -> Vec<bool> {
        self.roles().iter().map(|r| *r == LatentRole::Free).collect()
    }
}

impl LatentDynamics for LatentModel {
    fn latent_dim(&self) -> usize {
        LatentModel::latent_dim(self)
    }

    fn pose_dim(&self) -> usize {
        self.observation_dim()
    }

    fn step(&self, x: &DVector<f64>) -> (DVector<f64>, f64) {
        self.dynamics_gp().mean_and_variance(x.as_slice())
    }

    fn step_mean(&self, x: &DVector<f64>) -> DVector<f64> {
        self.dynamics_gp().mean(x.as_slice())
    }

    fn pose(&self, x: &DVector<f64>) -> DVector<f64> {
        self.mapping_gp().mean(x.as_slice()) + self.offsets()
    }

    fn pose_with_variance(&self, x: &DVector<f64>) -> (DVector<f64>, f64) {
        let (m, v) = self.mapping_gp().mean_and_variance(x.as_slice());
        (m + self.offsets(), v)
    }

    fn roles(&self) -> &[LatentRole] {
        LatentModel::roles(self)
    }

    fn velocity_channels(&self) -> Option<VelocityChannels> {
        LatentModel::velocity_channels(self)
    }

    fn frame_rate(&self) -> f64 {
        LatentModel::frame_rate(self)
    }
}

/// `x' = A x + sqrt(v) w`, pose = latent. Used as an analytic test bed.
#[derive(Debug, Clone)]
pub struct LinearGaussianDynamics {
    pub transition: DMatrix<f64>,
    pub noise_variance: f64,
    pub roles: Vec<LatentRole>,
    pub frame_rate: f64,
}

impl LinearGaussianDynamics {
    pub fn new(transition: DMatrix<f64>, noise_variance: f64, frame_rate: f64) -> Self {
        let d = transition.nrows();
        Self {
            transition,
            noise_variance,
            roles: vec![LatentRole::Free; d],
            frame_rate,
        }
    }
}

impl LatentDynamics for LinearGaussianDynamics {
    fn latent_dim(&self) -> usize {
        self.transition.nrows()
    }

    fn pose_dim(&self) -> usize {
        self.transition.nrows()
    }

    fn step(&self, x: &DVector<f64>) -> (DVector<f64>, f64) {
        (&self.transition * x, self.noise_variance)
    }

    fn pose(&self, x: &DVector<f64>) -> DVector<f64> {
        x.clone()
    }

    fn pose_with_variance(&self, x: &DVector<f64>) -> (DVector<f64>, f64) {
        (x.clone(), 0.0)
    }

    fn roles(&self) -> &[LatentRole] {
        &self.roles
    }

    fn velocity_channels(&self) -> Option<VelocityChannels> {
        None
    }

    fn frame_rate(&self) -> f64 {
        self.frame_rate
    }
}

/// Mean and covariance of `x_{k+1} | x_k`. Periodic-phase dimensions get no noise.
pub fn latent_step_distribution<M: LatentDynamics + ?Sized>(model: &M, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (mean, var) = model.step(x);
    let mask = model.noisy_mask();
    let cov = DMatrix::from_fn(mean.len(), mean.len(), |i, j| if i == j && mask[i] { var } else { 0.0 });
    (mean, cov)
}

/// Noise-free pose `mu_Y(x)` plus channel offsets.
pub fn decode_pose<M: LatentDynamics + ?Sized>(model: &M, x: &DVector<f64>) -> DVector<f64> {
    model.pose(x)
}

/// Pose sampled from the full Gaussian posterior rather than its mean.
pub fn decode_pose_with_noise<M: LatentDynamics + ?Sized, R: Rng + ?Sized>(model: &M, x: &DVector<f64>, rng: &mut R) -> DVector<f64> {
    let (mean, var) = model.pose_with_variance(x);
    let sd = var.sqrt();
    mean.map(|m| {
        let z: f64 = StandardNormal.sample(rng);
        m + sd * z
    })
}

/// One step of the global pose: `g + h R_theta (v + sqrt(var) * noise)`.
///
/// The rotation acts on the (forward, lateral) pair; yaw rate passes through.
pub fn global_step(
    g: &Vector3<f64>,
    y: &DVector<f64>,
    var_v: [f64; 3],
    noise: [f64; 3],
    channels: VelocityChannels,
    h: f64,
) -> Vector3<f64> {
    let v = channels.read(y);
    let vf = v[0] + var_v[0].max(0.0).sqrt() * noise[0];
    let vl = v[1] + var_v[1].max(0.0).sqrt() * noise[1];
    let vy = v[2] + var_v[2].max(0.0).sqrt() * noise[2];
    let (s, c) = g[2].sin_cos();
    Vector3::new(
        g[0] + h * (c * vf - s * vl),
        g[1] + h * (s * vf + c * vl),
        wrap_angle(g[2] + h * vy),
    )
}

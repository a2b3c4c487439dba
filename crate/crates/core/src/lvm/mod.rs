//! Gaussian-process latent variable models with latent dynamics (GPDM).
//!
//! Training maximizes `log p(Y|X,beta) + log p(X|alpha) + log p(alpha) + log p(beta)`
//! over the latent coordinates (or, with back-constraints, over the weights of
//! a kernel-regression map from observations to latents) and the log of both
//! kernels' hyperparameters.

mod backconstraint;
mod io;
mod objective;
mod optimize;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use backconstraint::{BackConstraintKind, BackConstraintSpec, BackConstraintWeights};
pub use objective::ObjectiveTerms;

use crate::dataset::MotionDataset;
use crate::dynamics::VelocityChannels;
use crate::error::{Error, Result};
use crate::gp::{GaussianProcess, KernelParams};
use objective::Layout;

/// Bounds on every log-hyperparameter during optimization.
pub const LOG_PARAM_BOUND: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentRole {
    Free,
    /// Deterministic under the learned dynamics; no process noise is injected.
    PeriodicPhase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub latent_dim: usize,
    pub iterations: usize,
    #[serde(default)]
    pub back_constraints: Option<BackConstraintSpec>,
    #[serde(default)]
    pub seed: u64,
    pub dynamics_kernel: KernelParams,
    /// `None` sets the amplitude from the data variance.
    #[serde(default)]
    pub mapping_kernel: Option<KernelParams>,
    /// Variance of the Gaussian prior on each sequence's first latent point.
    pub head_prior_variance: f64,
    /// Std of the seeded perturbation added to the PCA initialization.
    pub init_jitter: f64,
    /// Ridge used when fitting back-constraint weights to the initialization.
    pub back_constraint_ridge: f64,
}

impl TrainConfig {
    pub fn new(latent_dim: usize, iterations: usize) -> Self {
        Self {
            latent_dim,
            iterations,
            back_constraints: None,
            seed: 0,
            dynamics_kernel: KernelParams::new(1.0, 1.0, 100.0),
            mapping_kernel: None,
            head_prior_variance: 1.0,
            init_jitter: 1e-3,
            back_constraint_ridge: 1e-3,
        }
    }

    pub fn with_back_constraints(mut self, spec: BackConstraintSpec) -> Self {
        self.back_constraints = Some(spec);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BackConstraints {
    spec: BackConstraintSpec,
    weights: BackConstraintWeights,
}

/// A trained (or directly assembled) latent dynamical model.
#[derive(Debug, Clone)]
pub struct LatentModel {
    latent: DMatrix<f64>,
    targets: DMatrix<f64>,
    offsets: DVector<f64>,
    sequence_starts: Vec<usize>,
    phase: Option<Vec<f64>>,
    dyn_params: KernelParams,
    map_params: KernelParams,
    back_constraints: Option<BackConstraints>,
    roles: Vec<LatentRole>,
    frame_rate: f64,
    velocity_channels: Option<VelocityChannels>,
    channel_names: Vec<String>,
    head_prior_variance: f64,
    dynamics_gp: GaussianProcess,
    mapping_gp: GaussianProcess,
}

pub(crate) struct ModelParts {
    pub latent: DMatrix<f64>,
    pub targets: DMatrix<f64>,
    pub offsets: DVector<f64>,
    pub sequence_starts: Vec<usize>,
    pub phase: Option<Vec<f64>>,
    pub dyn_params: KernelParams,
    pub map_params: KernelParams,
    pub back_constraints: Option<(BackConstraintSpec, BackConstraintWeights)>,
    pub roles: Vec<LatentRole>,
    pub frame_rate: f64,
    pub velocity_channels: Option<VelocityChannels>,
    pub channel_names: Vec<String>,
    pub head_prior_variance: f64,
}

impl LatentModel {
    pub(crate) fn assemble(parts: ModelParts) -> Result<Self> {
        let n = parts.latent.nrows();
        if parts.targets.nrows() != n || parts.roles.len() != parts.latent.ncols() {
            return Err(Error::invalid("latent, targets and roles disagree in shape"));
        }
        let layout = Layout::new(n, &parts.sequence_starts);
        let dynamics_gp = GaussianProcess::fit(
            &layout.select(&parts.latent, &layout.inputs),
            &layout.select(&parts.latent, &layout.outputs),
            parts.dyn_params,
        )?;
        let mapping_gp = GaussianProcess::fit(&parts.latent, &parts.targets, parts.map_params)?;
        Ok(Self {
            latent: parts.latent,
            targets: parts.targets,
            offsets: parts.offsets,
            sequence_starts: parts.sequence_starts,
            phase: parts.phase,
            dyn_params: parts.dyn_params,
            map_params: parts.map_params,
            back_constraints: parts
                .back_constraints
                .map(|(spec, weights)| BackConstraints { spec, weights }),
            roles: parts.roles,
            frame_rate: parts.frame_rate,
            velocity_channels: parts.velocity_channels,
            channel_names: parts.channel_names,
            head_prior_variance: parts.head_prior_variance,
            dynamics_gp,
            mapping_gp,
        })
    }

    /// Builds a model around known latent coordinates without any optimization.
    pub fn from_coordinates(
        data: &MotionDataset,
        latent: DMatrix<f64>,
        dyn_params: KernelParams,
        map_params: KernelParams,
        roles: Vec<LatentRole>,
    ) -> Result<Self> {
        data.validate()?;
        if latent.nrows() != data.len() {
            return Err(Error::invalid("latent rows differ from frame count"));
        }
        let (targets, offsets) = center(&data.observations);
        Self::assemble(ModelParts {
            latent,
            targets,
            offsets,
            sequence_starts: data.sequence_starts.clone(),
            phase: data.phase.clone(),
            dyn_params,
            map_params,
            back_constraints: None,
            roles,
            frame_rate: data.frame_rate,
            velocity_channels: data.velocity_channels(),
            channel_names: data.channel_names.clone(),
            head_prior_variance: 1.0,
        })
    }

    pub fn latent(&self) -> &DMatrix<f64> {
        &self.latent
    }

    pub fn latent_dim(&self) -> usize {
        self.latent.ncols()
    }

    pub fn observation_dim(&self) -> usize {
        self.targets.ncols()
    }

    pub fn len(&self) -> usize {
        self.latent.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.latent.nrows() == 0
    }

    pub fn dynamics_params(&self) -> &KernelParams {
        &self.dyn_params
    }

    pub fn mapping_params(&self) -> &KernelParams {
        &self.map_params
    }

    pub fn roles(&self) -> &[LatentRole] {
        &self.roles
    }

    pub fn offsets(&self) -> &DVector<f64> {
        &self.offsets
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn sequence_starts(&self) -> &[usize] {
        &self.sequence_starts
    }

    pub fn velocity_channels(&self) -> Option<VelocityChannels> {
        self.velocity_channels
    }

    pub fn set_velocity_channels(&mut self, channels: Option<VelocityChannels>) {
        self.velocity_channels = channels;
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn head_prior_variance(&self) -> f64 {
        self.head_prior_variance
    }

    pub fn back_constraint_spec(&self) -> Option<&BackConstraintSpec> {
        self.back_constraints.as_ref().map(|b| &b.spec)
    }

    pub fn back_constraint_weights(&self) -> Option<&BackConstraintWeights> {
        self.back_constraints.as_ref().map(|b| &b.weights)
    }

    pub fn dynamics_gp(&self) -> &GaussianProcess {
        &self.dynamics_gp
    }

    pub fn mapping_gp(&self) -> &GaussianProcess {
        &self.mapping_gp
    }

    /// Training observations with the channel offsets added back.
    pub fn observations(&self) -> DMatrix<f64> {
        let mut y = self.targets.clone();
        for mut row in y.row_iter_mut() {
            row += self.offsets.transpose();
        }
        y
    }

    /// The dataset this model was trained on, reconstructed from the stored copy.
    pub fn dataset(&self) -> Result<MotionDataset> {
        MotionDataset::with_names(
            self.observations(),
            self.sequence_starts.clone(),
            self.phase.clone(),
            self.frame_rate,
            self.channel_names.clone(),
        )
    }

    /// `(from_row, to_row)` pairs of the dynamics training set.
    pub fn transitions(&self) -> Vec<(usize, usize)> {
        let l = Layout::new(self.len(), &self.sequence_starts);
        l.inputs.into_iter().zip(l.outputs).collect()
    }
}

fn center(y: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let offsets = DVector::from_iterator(y.ncols(), y.column_iter().map(|c| c.mean()));
    let mut centered = y.clone();
    for mut row in centered.row_iter_mut() {
        row -= offsets.transpose();
    }
    (centered, offsets)
}

/// Top-`k` principal-component scores of mean-centered rows, with the
/// corresponding covariance eigenvalues (descending).
pub fn principal_components(centered: &DMatrix<f64>, k: usize) -> (DMatrix<f64>, Vec<f64>) {
    let n = centered.nrows() as f64;
    let cov = centered.tr_mul(centered) / n;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut scores = DMatrix::zeros(centered.nrows(), k);
    let mut values = Vec::with_capacity(k);
    for (c, &idx) in order.iter().take(k).enumerate() {
        let mut v = eig.eigenvectors.column(idx).into_owned();
        // deterministic sign: largest-magnitude loading positive
        let imax = v.iamax();
        if v[imax] < 0.0 {
            v = -v;
        }
        scores.set_column(c, &(centered * v));
        values.push(eig.eigenvalues[idx]);
    }
    (scores, values)
}

fn roles_for(spec: Option<&BackConstraintSpec>, d: usize) -> Vec<LatentRole> {
    match spec {
        Some(s) => s
            .kinds
            .iter()
            .map(|k| {
                if k.is_periodic() {
                    LatentRole::PeriodicPhase
                } else {
                    LatentRole::Free
                }
            })
            .collect(),
        None => vec![LatentRole::Free; d],
    }
}

/// Initial latent coordinates: PCA for free dimensions (unit variance per
/// dimension), `(cos phase, sin phase)` for periodic ones.
pub fn init_latent(data: &MotionDataset, d: usize, spec: Option<&BackConstraintSpec>) -> Result<DMatrix<f64>> {
    if d == 0 || d > data.dim() {
        return Err(Error::invalid(format!("latent dim {d} must be in 1..={}", data.dim())));
    }
    if let Some(s) = spec {
        if s.kinds.len() != d {
            return Err(Error::invalid("back-constraint spec length differs from latent dim"));
        }
        if s.needs_phase() && data.phase.is_none() {
            return Err(Error::MissingPhase);
        }
    }
    let roles = roles_for(spec, d);
    let free = roles.iter().filter(|r| **r == LatentRole::Free).count();
    let (centered, _) = center(&data.observations);
    let (scores, _) = principal_components(&centered, free);
    let mut latent = DMatrix::zeros(data.len(), d);
    let mut next_free = 0;
    for j in 0..d {
        match (roles[j], spec.map(|s| s.kinds[j])) {
            (LatentRole::Free, _) => {
                let col = scores.column(next_free);
                let sd = (col.norm_squared() / col.len() as f64).sqrt();
                let scale = if sd > 0.0 { 1.0 / sd } else { 1.0 };
                latent.set_column(j, &(col * scale));
                next_free += 1;
            }
            (_, Some(BackConstraintKind::PeriodicSin { .. })) => {
                let p = data.phase.as_ref().ok_or(Error::MissingPhase)?;
                latent.set_column(j, &DVector::from_iterator(p.len(), p.iter().map(|v| v.sin())));
            }
            _ => {
                let p = data.phase.as_ref().ok_or(Error::MissingPhase)?;
                latent.set_column(j, &DVector::from_iterator(p.len(), p.iter().map(|v| v.cos())));
            }
        }
    }
    Ok(latent)
}

/// Gradient of the log joint density in the optimized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct MapGradient {
    /// w.r.t. latent coordinates, or back-constraint weights when active (N x d).
    pub coordinates: DMatrix<f64>,
    /// w.r.t. back-constraint offsets, when active.
    pub bias: Option<DVector<f64>>,
    pub log_alpha: [f64; 3],
    pub log_beta: [f64; 3],
}

/// The training objective as a function of a flat parameter vector.
///
/// Layout of the vector: latent coordinates (column-major N x d), or
/// back-constraint weights (column-major N x d) followed by d offsets; then
/// `log alpha` (3) and `log beta` (3).
pub struct MapProblem {
    targets: DMatrix<f64>,
    offsets: DVector<f64>,
    layout: Layout,
    features: Option<Vec<DMatrix<f64>>>,
    spec: Option<BackConstraintSpec>,
    latent_dim: usize,
    head_variance: f64,
}

impl MapProblem {
    pub fn new(
        data: &MotionDataset,
        latent_dim: usize,
        spec: Option<&BackConstraintSpec>,
        head_variance: f64,
    ) -> Result<Self> {
        data.validate()?;
        let (targets, offsets) = center(&data.observations);
        let features = match spec {
            Some(s) => {
                if s.kinds.len() != latent_dim {
                    return Err(Error::invalid("back-constraint spec length differs from latent dim"));
                }
                Some(s.features(&targets, data.phase.as_deref())?)
            }
            None => None,
        };
        Ok(Self {
            layout: Layout::new(data.len(), &data.sequence_starts),
            targets,
            offsets,
            features,
            spec: spec.cloned(),
            latent_dim,
            head_variance,
        })
    }

    fn for_model(model: &LatentModel, data: &MotionDataset) -> Result<Self> {
        Self::new(data, model.latent_dim(), model.back_constraint_spec(), model.head_prior_variance)
    }

    fn n(&self) -> usize {
        self.targets.nrows()
    }

    pub fn dimension(&self) -> usize {
        let coords = self.n() * self.latent_dim;
        coords + if self.features.is_some() { self.latent_dim } else { 0 } + 6
    }

    fn coordinate_len(&self) -> usize {
        self.dimension() - 6
    }

    /// Splits a parameter vector into latent coordinates and both kernels.
    pub fn unpack(&self, theta: &[f64]) -> (DMatrix<f64>, KernelParams, KernelParams) {
        let (n, d) = (self.n(), self.latent_dim);
        let nc = self.coordinate_len();
        let coords = DMatrix::from_column_slice(n, d, &theta[..n * d]);
        let latent = match &self.features {
            Some(f) => BackConstraintWeights {
                weights: coords,
                bias: DVector::from_column_slice(&theta[n * d..nc]),
            }
            .apply(f),
            None => coords,
        };
        (latent, KernelParams::from_log(&theta[nc..nc + 3]), KernelParams::from_log(&theta[nc + 3..nc + 6]))
    }

    pub fn pack(&self, model: &LatentModel) -> Vec<f64> {
        let mut theta: Vec<f64> = match (&self.features, model.back_constraint_weights()) {
            (Some(_), Some(w)) => w.weights.iter().chain(w.bias.iter()).copied().collect(),
            _ => model.latent.iter().copied().collect(),
        };
        theta.extend(model.dyn_params.to_log());
        theta.extend(model.map_params.to_log());
        theta
    }

    pub fn terms(&self, theta: &[f64]) -> Result<ObjectiveTerms> {
        let (latent, alpha, beta) = self.unpack(theta);
        objective::evaluate(&self.targets, &self.layout, &latent, &alpha, &beta, self.head_variance)
    }

    pub fn objective(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.terms(theta)?.total())
    }

    pub fn objective_and_gradient(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (latent, alpha, beta) = self.unpack(theta);
        let ev = objective::evaluate_with_gradient(&self.targets, &self.layout, &latent, &alpha, &beta, self.head_variance)?;
        let mut grad: Vec<f64> = match &self.features {
            Some(f) => {
                let (dw, db) = BackConstraintWeights::pull_back(f, &ev.d_latent);
                dw.iter().chain(db.iter()).copied().collect()
            }
            None => ev.d_latent.iter().copied().collect(),
        };
        grad.extend(ev.d_log_alpha);
        grad.extend(ev.d_log_beta);
        Ok((ev.terms.total(), grad))
    }

    fn gradient_struct(&self, grad: &[f64]) -> MapGradient {
        let (n, d) = (self.n(), self.latent_dim);
        let nc = self.coordinate_len();
        MapGradient {
            coordinates: DMatrix::from_column_slice(n, d, &grad[..n * d]),
            bias: self.features.as_ref().map(|_| DVector::from_column_slice(&grad[n * d..nc])),
            log_alpha: [grad[nc], grad[nc + 1], grad[nc + 2]],
            log_beta: [grad[nc + 3], grad[nc + 4], grad[nc + 5]],
        }
    }

    fn clip(&self, theta: &mut [f64]) {
        let nc = self.coordinate_len();
        for v in theta[nc..].iter_mut() {
            *v = v.clamp(-LOG_PARAM_BOUND, LOG_PARAM_BOUND);
        }
    }

    fn build_model(&self, theta: &[f64], data: &MotionDataset) -> Result<LatentModel> {
        let (latent, alpha, beta) = self.unpack(theta);
        let n = self.n();
        let d = self.latent_dim;
        let back_constraints = match (&self.spec, &self.features) {
            (Some(spec), Some(_)) => Some((
                spec.clone(),
                BackConstraintWeights {
                    weights: DMatrix::from_column_slice(n, d, &theta[..n * d]),
                    bias: DVector::from_column_slice(&theta[n * d..n * d + d]),
                },
            )),
            _ => None,
        };
        LatentModel::assemble(ModelParts {
            latent,
            targets: self.targets.clone(),
            offsets: self.offsets.clone(),
            sequence_starts: data.sequence_starts.clone(),
            phase: data.phase.clone(),
            dyn_params: alpha,
            map_params: beta,
            back_constraints,
            roles: roles_for(self.spec.as_ref(), d),
            frame_rate: data.frame_rate,
            velocity_channels: data.velocity_channels(),
            channel_names: data.channel_names.clone(),
            head_prior_variance: self.head_variance,
        })
    }
}

/// `log p(X, Y, alpha, beta)` for a model and the data it describes.
pub fn log_map_objective(model: &LatentModel, data: &MotionDataset) -> Result<f64> {
    let problem = MapProblem::for_model(model, data)?;
    problem.objective(&problem.pack(model))
}

pub fn objective_terms(model: &LatentModel, data: &MotionDataset) -> Result<ObjectiveTerms> {
    let problem = MapProblem::for_model(model, data)?;
    problem.terms(&problem.pack(model))
}

pub fn grad_map_objective(model: &LatentModel, data: &MotionDataset) -> Result<MapGradient> {
    let problem = MapProblem::for_model(model, data)?;
    let (_, g) = problem.objective_and_gradient(&problem.pack(model))?;
    Ok(problem.gradient_struct(&g))
}

fn initial_theta(problem: &MapProblem, data: &MotionDataset, config: &TrainConfig) -> Result<Vec<f64>> {
    let d = config.latent_dim;
    let mut latent = init_latent(data, d, config.back_constraints.as_ref())?;
    let roles = roles_for(config.back_constraints.as_ref(), d);
    if config.init_jitter > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for j in (0..d).filter(|&j| roles[j] == LatentRole::Free) {
            for i in 0..latent.nrows() {
                let z: f64 = StandardNormal.sample(&mut rng);
                latent[(i, j)] += config.init_jitter * z;
            }
        }
    }
    let mut theta: Vec<f64> = match &problem.features {
        Some(f) => {
            let w = BackConstraintWeights::fit(f, &latent, config.back_constraint_ridge)?;
            w.weights.iter().chain(w.bias.iter()).copied().collect()
        }
        None => latent.iter().copied().collect(),
    };
    let beta = config.mapping_kernel.unwrap_or_else(|| {
        let var = problem.targets.norm_squared() / (problem.targets.len().max(1)) as f64;
        KernelParams::new(var.max(1e-6), 1.0, 100.0 / var.max(1e-6))
    });
    theta.extend(config.dynamics_kernel.to_log());
    theta.extend(beta.to_log());
    problem.clip(&mut theta);
    Ok(theta)
}

/// Trains a model and returns it with the objective after every accepted step.
pub fn train_with_history(data: &MotionDataset, config: &TrainConfig) -> Result<(LatentModel, Vec<f64>)> {
    if let Some(s) = &config.back_constraints {
        if s.needs_phase() && data.phase.is_none() {
            return Err(Error::MissingPhase);
        }
    }
    let problem = MapProblem::new(data, config.latent_dim, config.back_constraints.as_ref(), config.head_prior_variance)?;
    let theta = initial_theta(&problem, data, config)?;
    let result = optimize::maximize(theta, config.iterations, |t| problem.objective_and_gradient(t), |t| problem.clip(t))?;
    let model = problem.build_model(&result.theta, data)?;
    Ok((model, result.history))
}

pub fn train(data: &MotionDataset, config: &TrainConfig) -> Result<LatentModel> {
    train_with_history(data, config).map(|(m, _)| m)
}

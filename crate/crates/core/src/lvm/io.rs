//! JSON model files.
//!
//! A model file is one self-describing object; see the README for the
//! schema. Training observations are stored mean-centered together with the
//! channel offsets, since the pose posterior needs them at planning time.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{BackConstraintKind, BackConstraintSpec, BackConstraintWeights, LatentModel, LatentRole, ModelParts};
use crate::dynamics::VelocityChannels;
use crate::error::{Error, Result};
use crate::gp::KernelParams;

pub const MODEL_FORMAT: &str = "latentplan-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct BackConstraintFile {
    kinds: Vec<BackConstraintKind>,
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    latent_dim: usize,
    observation_dim: usize,
    frame_rate: f64,
    channel_names: Vec<String>,
    channel_offsets: Vec<f64>,
    sequence_starts: Vec<usize>,
    latent_dim_roles: Vec<LatentRole>,
    dynamics_kernel: KernelParams,
    mapping_kernel: KernelParams,
    head_prior_variance: f64,
    #[serde(default)]
    velocity_channels: Option<[usize; 3]>,
    #[serde(default)]
    back_constraints: Option<BackConstraintFile>,
    #[serde(default)]
    phase: Option<Vec<f64>>,
    /// N x d
    latent: Vec<Vec<f64>>,
    /// N x D, mean-centered
    observations: Vec<Vec<f64>>,
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], cols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::invalid(format!("{what}: every row must have {cols} entries")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), cols, &flat))
}

impl LatentModel {
    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            latent_dim: self.latent_dim(),
            observation_dim: self.observation_dim(),
            frame_rate: self.frame_rate,
            channel_names: self.channel_names.clone(),
            channel_offsets: self.offsets.iter().copied().collect(),
            sequence_starts: self.sequence_starts.clone(),
            latent_dim_roles: self.roles.clone(),
            dynamics_kernel: self.dyn_params,
            mapping_kernel: self.map_params,
            head_prior_variance: self.head_prior_variance,
            velocity_channels: self.velocity_channels.map(|v| v.indices()),
            back_constraints: self.back_constraints.as_ref().map(|b| BackConstraintFile {
                kinds: b.spec.kinds.clone(),
                weights: to_rows(&b.weights.weights),
                bias: b.weights.bias.iter().copied().collect(),
            }),
            phase: self.phase.clone(),
            latent: to_rows(&self.latent),
            observations: to_rows(&self.targets),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: ModelFile = serde_json::from_str(text)?;
        if f.format != MODEL_FORMAT {
            return Err(Error::invalid(format!("not a model file (format {:?})", f.format)));
        }
        if f.version != MODEL_VERSION {
            return Err(Error::invalid(format!("unsupported model version {}", f.version)));
        }
        let latent = from_rows(&f.latent, f.latent_dim, "latent")?;
        let targets = from_rows(&f.observations, f.observation_dim, "observations")?;
        if f.channel_offsets.len() != f.observation_dim {
            return Err(Error::invalid("channel_offsets length differs from observation_dim"));
        }
        let velocity_channels = f
            .velocity_channels
            .map(|idx| VelocityChannels::new(idx, f.observation_dim))
            .transpose()?;
        let back_constraints = f
            .back_constraints
            .map(|b| -> Result<_> {
                let weights = from_rows(&b.weights, f.latent_dim, "back_constraints.weights")?;
                Ok((
                    BackConstraintSpec::new(b.kinds),
                    BackConstraintWeights {
                        weights,
                        bias: DVector::from_vec(b.bias),
                    },
                ))
            })
            .transpose()?;
        LatentModel::assemble(ModelParts {
            latent,
            targets,
            offsets: DVector::from_vec(f.channel_offsets),
            sequence_starts: f.sequence_starts,
            phase: f.phase,
            dyn_params: f.dynamics_kernel,
            map_params: f.mapping_kernel,
            back_constraints,
            roles: f.latent_dim_roles,
            frame_rate: f.frame_rate,
            velocity_channels,
            channel_names: f.channel_names,
            head_prior_variance: f.head_prior_variance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

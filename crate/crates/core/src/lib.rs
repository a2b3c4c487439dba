//! Latent-space motion planning.
//!
//! Learns a Gaussian-process latent variable model with latent dynamics from
//! sequential pose data, then plans maximum-a-posteriori trajectories through
//! it by treating low cost as an observation to be explained. The MAP search
//! runs Viterbi over a particle-filter trellis; a coarse-to-fine path-integral
//! cascade can supply guidance controls.

pub mod arena;
pub mod dataset;
pub mod dynamics;
pub mod error;
pub mod gp;
pub mod lvm;
pub mod multiscale;
pub mod oracle;
pub mod planner;
pub mod synth;
pub mod tasks;

pub use dataset::MotionDataset;
pub use dynamics::{AugmentedState, LatentDynamics, VelocityChannels};
pub use error::{Error, Result};
pub use gp::{GaussianProcess, GramCache, KernelParams};
pub use lvm::{LatentModel, LatentRole, TrainConfig};

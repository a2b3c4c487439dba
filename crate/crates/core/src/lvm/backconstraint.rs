//! Kernel-regression maps from observations (or phase) to latent coordinates.
//!
//! Latent column `j` is `B_j a_j + b_j`, where `B_j` is an N x N kernel
//! matrix over the training frames, `a_j` are the regression weights and
//! `b_j` a scalar offset. For the periodic kinds `B_j` compares `cos(phase)`
//! (or `sin(phase)`) values instead of whole observation rows.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackConstraintKind {
    RbfRegression { width: f64 },
    PeriodicCos { width: f64 },
    PeriodicSin { width: f64 },
}

impl BackConstraintKind {
    pub fn is_periodic(&self) -> bool {
        !matches!(self, BackConstraintKind::RbfRegression { .. })
    }

    fn width(&self) -> f64 {
        match *self {
            BackConstraintKind::RbfRegression { width }
            | BackConstraintKind::PeriodicCos { width }
            | BackConstraintKind::PeriodicSin { width } => width,
        }
    }
}

/// One kind per latent dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackConstraintSpec {
    pub kinds: Vec<BackConstraintKind>,
}

impl BackConstraintSpec {
    pub fn new(kinds: Vec<BackConstraintKind>) -> Self {
        Self { kinds }
    }

    /// `free` RBF-regression dimensions followed by a cos/sin phase pair.
    pub fn with_phase(free: usize, rbf_width: f64, phase_width: f64) -> Self {
        let mut kinds = vec![BackConstraintKind::RbfRegression { width: rbf_width }; free];
        kinds.push(BackConstraintKind::PeriodicCos { width: phase_width });
        kinds.push(BackConstraintKind::PeriodicSin { width: phase_width });
        Self { kinds }
    }

    pub fn needs_phase(&self) -> bool {
        self.kinds.iter().any(BackConstraintKind::is_periodic)
    }

    /// Kernel matrix for every latent dimension.
    pub fn features(&self, y: &DMatrix<f64>, phase: Option<&[f64]>) -> Result<Vec<DMatrix<f64>>> {
        if self.needs_phase() && phase.is_none() {
            return Err(Error::MissingPhase);
        }
        let n = y.nrows();
        let mut obs_sq = None;
        self.kinds
            .iter()
            .map(|kind| {
                let w2 = kind.width() * kind.width();
                if !(w2 > 0.0) {
                    return Err(Error::invalid("back-constraint width must be positive"));
                }
                Ok(match kind {
                    BackConstraintKind::RbfRegression { .. } => {
                        let sq = obs_sq.get_or_insert_with(|| pairwise_sq(y));
                        sq.map(|d: f64| (-0.5 * d / w2).exp())
                    }
                    BackConstraintKind::PeriodicCos { .. } | BackConstraintKind::PeriodicSin { .. } => {
                        let phase = phase.expect("checked above");
                        let f: Vec<f64> = match kind {
                            BackConstraintKind::PeriodicCos { .. } => phase.iter().map(|p| p.cos()).collect(),
                            _ => phase.iter().map(|p| p.sin()).collect(),
                        };
                        DMatrix::from_fn(n, n, |i, j| (-0.5 * (f[i] - f[j]).powi(2) / w2).exp())
                    }
                })
            })
            .collect()
    }
}

fn pairwise_sq(y: &DMatrix<f64>) -> DMatrix<f64> {
    let n = y.nrows();
    DMatrix::from_fn(n, n, |i, j| (y.row(i) - y.row(j)).norm_squared())
}

/// Back-constraint weights in the form stored with a model.
#[derive(Debug, Clone, PartialEq)]
pub struct BackConstraintWeights {
    /// N x d
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl BackConstraintWeights {
    pub fn apply(&self, features: &[DMatrix<f64>]) -> DMatrix<f64> {
        let n = self.weights.nrows();
        let mut out = DMatrix::zeros(n, features.len());
        for (j, b) in features.iter().enumerate() {
            let col = b * self.weights.column(j) + DVector::from_element(n, self.bias[j]);
            out.set_column(j, &col);
        }
        out
    }

    /// Ridge fit of weights so that the mapping reproduces `target`.
    pub fn fit(features: &[DMatrix<f64>], target: &DMatrix<f64>, ridge: f64) -> Result<Self> {
        let n = target.nrows();
        let d = features.len();
        let mut weights = DMatrix::zeros(n, d);
        let mut bias = DVector::zeros(d);
        for (j, b) in features.iter().enumerate() {
            let col = target.column(j);
            let mean = col.mean();
            let centered = col.map(|v| v - mean);
            let mut reg = b.clone();
            for i in 0..n {
                reg[(i, i)] += ridge;
            }
            let a = reg
                .lu()
                .solve(&centered)
                .ok_or_else(|| Error::FactorizationFailure("back-constraint ridge system".into()))?;
            weights.set_column(j, &a);
            bias[j] = mean;
        }
        Ok(Self { weights, bias })
    }

    /// Chain rule: latent-space gradient to (weight, bias) gradients.
    pub fn pull_back(features: &[DMatrix<f64>], d_latent: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
        let n = d_latent.nrows();
        let mut dw = DMatrix::zeros(n, features.len());
        let mut db = DVector::zeros(features.len());
        for (j, b) in features.iter().enumerate() {
            let g = d_latent.column(j);
            dw.set_column(j, &b.tr_mul(&g));
            db[j] = g.sum();
        }
        (dw, db)
    }
}

//! Log joint density of the GPDM and its analytic gradient.

use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::gp::{gram, rows_of, KernelParams};

/// Which latent rows feed the dynamics GP.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub inputs: Vec<usize>,
    pub outputs: Vec<usize>,
    pub heads: Vec<usize>,
}

impl Layout {
    pub fn new(n: usize, sequence_starts: &[usize]) -> Self {
        let mut inputs = Vec::new();
        let mut outputs = Vec::new();
        for (i, &s) in sequence_starts.iter().enumerate() {
            let e = sequence_starts.get(i + 1).copied().unwrap_or(n);
            for r in s..e - 1 {
                inputs.push(r);
                outputs.push(r + 1);
            }
        }
        Self {
            inputs,
            outputs,
            heads: sequence_starts.to_vec(),
        }
    }

    pub fn select(&self, latent: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), latent.ncols(), |i, j| latent[(rows[i], j)])
    }
}

/// The separately named pieces of the log joint density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveTerms {
    /// `log p(Y | X, beta)`
    pub observation: f64,
    /// `log p(X | alpha)` without the sequence-head prior.
    pub dynamics: f64,
    /// Standard-normal (or configured) prior on each sequence head.
    pub initial: f64,
    /// `log p(alpha) + log p(beta)` under the `1/theta` prior.
    pub hyperprior: f64,
}

impl ObjectiveTerms {
    pub fn total(&self) -> f64 {
        self.observation + self.dynamics + self.initial + self.hyperprior
    }
}

pub(crate) struct Evaluation {
    pub terms: ObjectiveTerms,
    pub d_latent: DMatrix<f64>,
    pub d_log_alpha: [f64; 3],
    pub d_log_beta: [f64; 3],
}

struct BlockGradient {
    d_inputs: DMatrix<f64>,
    d_targets: DMatrix<f64>,
    d_log_params: [f64; 3],
}

/// Log-likelihood of `targets` (n x D, independent columns) under a zero-mean
/// GP on `inputs`, optionally with its gradient.
fn gp_block(
    inputs: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    p: &KernelParams,
    want_grad: bool,
) -> Result<(f64, Option<BlockGradient>)> {
    let n = inputs.nrows();
    let dims = targets.ncols() as f64;
    let cache = gram(inputs, p)?;
    let a = cache.solve(targets);
    let trace: f64 = a.iter().zip(targets.iter()).map(|(x, y)| x * y).sum();
    let ll = -0.5 * dims * cache.log_det() - 0.5 * trace - 0.5 * n as f64 * dims * (2.0 * PI).ln();
    if !want_grad {
        return Ok((ll, None));
    }

    let kinv = cache.inverse();
    let g = (&a * a.transpose() - kinv * dims) * 0.5;
    let rows = rows_of(inputs);
    let gamma = p.inverse_lengthscale;
    let mut d_inputs = DMatrix::zeros(n, inputs.ncols());
    let (mut d_amp, mut d_gamma) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let sq: f64 = rows[i].iter().zip(&rows[j]).map(|(x, y)| (x - y) * (x - y)).sum();
            let k = p.amplitude * (-0.5 * gamma * sq).exp();
            let gij = g[(i, j)];
            d_amp += gij * k;
            d_gamma += gij * k * (-0.5 * gamma * sq);
            if i != j {
                let c = -2.0 * gamma * gij * k;
                for (c_idx, (xi, xj)) in rows[i].iter().zip(&rows[j]).enumerate() {
                    d_inputs[(i, c_idx)] += c * (xi - xj);
                }
            }
        }
    }
    let d_noise: f64 = (0..n).map(|i| g[(i, i)]).sum::<f64>() * (-1.0 / p.noise_precision);
    Ok((
        ll,
        Some(BlockGradient {
            d_inputs,
            d_targets: -a,
            d_log_params: [d_amp, d_gamma, d_noise],
        }),
    ))
}

fn hyperprior(alpha: &KernelParams, beta: &KernelParams) -> f64 {
    -(alpha.to_log().iter().sum::<f64>() + beta.to_log().iter().sum::<f64>())
}

fn initial_prior(latent: &DMatrix<f64>, heads: &[usize], variance: f64) -> f64 {
    let d = latent.ncols() as f64;
    heads
        .iter()
        .map(|&h| {
            let sq: f64 = latent.row(h).iter().map(|v| v * v).sum();
            -0.5 * sq / variance - 0.5 * d * (2.0 * PI * variance).ln()
        })
        .sum()
}

pub(crate) fn evaluate(
    y: &DMatrix<f64>,
    layout: &Layout,
    latent: &DMatrix<f64>,
    alpha: &KernelParams,
    beta: &KernelParams,
    head_variance: f64,
) -> Result<ObjectiveTerms> {
    let (observation, _) = gp_block(latent, y, beta, false)?;
    let dynamics = if layout.inputs.is_empty() {
        0.0
    } else {
        let xin = layout.select(latent, &layout.inputs);
        let xout = layout.select(latent, &layout.outputs);
        gp_block(&xin, &xout, alpha, false)?.0
    };
    let terms = ObjectiveTerms {
        observation,
        dynamics,
        initial: initial_prior(latent, &layout.heads, head_variance),
        hyperprior: hyperprior(alpha, beta),
    };
    if !terms.total().is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    Ok(terms)
}

pub(crate) fn evaluate_with_gradient(
    y: &DMatrix<f64>,
    layout: &Layout,
    latent: &DMatrix<f64>,
    alpha: &KernelParams,
    beta: &KernelParams,
    head_variance: f64,
) -> Result<Evaluation> {
    let (observation, obs_grad) = gp_block(latent, y, beta, true)?;
    let obs_grad = obs_grad.expect("gradient requested");
    let mut d_latent = obs_grad.d_inputs;

    let mut dynamics = 0.0;
    let mut d_log_alpha = [0.0; 3];
    if !layout.inputs.is_empty() {
        let xin = layout.select(latent, &layout.inputs);
        let xout = layout.select(latent, &layout.outputs);
        let (ll, g) = gp_block(&xin, &xout, alpha, true)?;
        let g = g.expect("gradient requested");
        dynamics = ll;
        for (r, &row) in layout.inputs.iter().enumerate() {
            for c in 0..latent.ncols() {
                d_latent[(row, c)] += g.d_inputs[(r, c)];
            }
        }
        for (r, &row) in layout.outputs.iter().enumerate() {
            for c in 0..latent.ncols() {
                d_latent[(row, c)] += g.d_targets[(r, c)];
            }
        }
        d_log_alpha = g.d_log_params;
    }
    for &h in &layout.heads {
        for c in 0..latent.ncols() {
            d_latent[(h, c)] -= latent[(h, c)] / head_variance;
        }
    }
    for v in d_log_alpha.iter_mut() {
        *v -= 1.0;
    }
    let mut d_log_beta = obs_grad.d_log_params;
    for v in d_log_beta.iter_mut() {
        *v -= 1.0;
    }

    let terms = ObjectiveTerms {
        observation,
        dynamics,
        initial: initial_prior(latent, &layout.heads, head_variance),
        hyperprior: hyperprior(alpha, beta),
    };
    if !terms.total().is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    Ok(Evaluation {
        terms,
        d_latent,
        d_log_alpha,
        d_log_beta,
    })
}

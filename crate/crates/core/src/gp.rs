//! RBF kernels, Gram matrices and Gaussian-process posteriors.
//!
//! Every other module goes through this one for kernel evaluations. The
//! kernel is
//!
//! ```text
//! k(a, b) = amplitude * exp(-inverse_lengthscale / 2 * |a - b|^2) + delta_ab / noise_precision
//! ```
//!
//! where the Kronecker delta is applied by *training index*, never by value
//! comparison, so near-duplicate rows still get distinct noise terms.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters of the RBF-plus-white-noise kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub amplitude: f64,
    pub inverse_lengthscale: f64,
    pub noise_precision: f64,
}

impl KernelParams {
    pub fn new(amplitude: f64, inverse_lengthscale: f64, noise_precision: f64) -> Self {
        Self {
            amplitude,
            inverse_lengthscale,
            noise_precision,
        }
    }

    pub fn to_log(&self) -> [f64; 3] {
        [
            self.amplitude.ln(),
            self.inverse_lengthscale.ln(),
            self.noise_precision.ln(),
        ]
    }

    pub fn from_log(v: &[f64]) -> Self {
        Self::new(v[0].exp(), v[1].exp(), v[2].exp())
    }

    pub fn is_valid(&self) -> bool {
        [self.amplitude, self.inverse_lengthscale, self.noise_precision]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0)
    }

    /// Prior variance of a single fresh output, `k(x, x)` with the noise term.
    pub fn prior_variance(&self) -> f64 {
        self.amplitude + 1.0 / self.noise_precision
    }

    /// The smooth (noise-free) part of the kernel.
    #[inline]
    pub fn rbf(&self, a: &[f64], b: &[f64]) -> f64 {
        let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        self.amplitude * (-0.5 * self.inverse_lengthscale * sq).exp()
    }
}

pub fn rbf_kernel(a: &[f64], b: &[f64], p: &KernelParams, same_index: bool) -> f64 {
    let k = p.rbf(a, b);
    if same_index {
        k + 1.0 / p.noise_precision
    } else {
        k
    }
}

fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

/// Rows of `m` as contiguous vectors, for fast repeated kernel evaluation.
pub(crate) fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| row(m, i)).collect()
}

/// A factorized kernel matrix.
#[derive(Debug, Clone)]
pub struct GramCache {
    gram: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
}

impl GramCache {
    /// Factorizes a symmetric matrix, retrying once with a small diagonal jitter.
    pub fn from_matrix(gram: DMatrix<f64>) -> Result<Self> {
        let n = gram.nrows();
        if n == 0 || gram.ncols() != n {
            return Err(Error::FactorizationFailure("empty or non-square".into()));
        }
        if gram.iter().any(|v| !v.is_finite()) {
            return Err(Error::FactorizationFailure("non-finite entries".into()));
        }
        let chol = match Cholesky::new(gram.clone()) {
            Some(c) => c,
            None => {
                let jitter = 1e-10 * gram.trace() / n as f64;
                let mut jittered = gram.clone();
                for i in 0..n {
                    jittered[(i, i)] += jitter;
                }
                Cholesky::new(jittered).ok_or_else(|| {
                    Error::FactorizationFailure(format!("{n}x{n} gram after jitter {jitter:e}"))
                })?
            }
        };
        let l = chol.l_dirty();
        let log_det = 2.0 * (0..n).map(|i| l[(i, i)].ln()).sum::<f64>();
        Ok(Self {
            gram,
            chol,
            log_det,
        })
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn chol(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn len(&self) -> usize {
        self.gram.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// `L^{-1} b` by forward substitution.
    pub fn half_solve(&self, b: &DVector<f64>) -> DVector<f64> {
        // column-oriented forward substitution; same subtraction order as the
        // row form, contiguous reads of the column-major factor
        let l = self.chol.l_dirty();
        let n = b.len();
        let mut out = b.clone();
        for j in 0..n {
            let col = l.column(j);
            let col = col.as_slice();
            let v = out[j] / col[j];
            out[j] = v;
            for (o, lij) in out.as_mut_slice()[j + 1..].iter_mut().zip(&col[j + 1..]) {
                *o -= lij * v;
            }
        }
        out
    }

    /// `K^{-1}`, obtained from the Cholesky factor.
    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

/// Builds the Gram matrix of `rows` under `p` and factorizes it.
pub fn gram(rows: &DMatrix<f64>, p: &KernelParams) -> Result<GramCache> {
    let n = rows.nrows();
    if n == 0 {
        return Err(Error::FactorizationFailure("no rows".into()));
    }
    let r = rows_of(rows);
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = rbf_kernel(&r[i], &r[j], p, i == j);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    GramCache::from_matrix(k)
}

/// Posterior mean and (scalar, isotropic) variance at `xstar`.
///
/// `k(x*, x*)` includes the white-noise term. The variance is clamped at zero.
pub fn gp_posterior(
    xstar: &[f64],
    train_in: &DMatrix<f64>,
    train_out: &DMatrix<f64>,
    cache: &GramCache,
    p: &KernelParams,
) -> (DVector<f64>, f64) {
    let kstar = DVector::from_iterator(
        train_in.nrows(),
        (0..train_in.nrows()).map(|i| p.rbf(xstar, &row(train_in, i))),
    );
    let weights = cache.solve(train_out);
    let mean = weights.transpose() * &kstar;
    let v = cache.half_solve(&kstar);
    (mean, clamp_variance(p.prior_variance() - v.dot(&v), p))
}

fn clamp_variance(raw: f64, p: &KernelParams) -> f64 {
    if raw < -1e-8 * p.prior_variance() {
        log::warn!("posterior variance {raw:e} is negative beyond round-off");
    }
    raw.max(0.0)
}

/// A GP regressor with cached `K^{-1} Y`, for repeated posterior queries.
#[derive(Debug, Clone)]
pub struct GaussianProcess {
    inputs: Vec<Vec<f64>>,
    params: KernelParams,
    cache: GramCache,
    weights: DMatrix<f64>,
}

impl GaussianProcess {
    pub fn fit(inputs: &DMatrix<f64>, targets: &DMatrix<f64>, params: KernelParams) -> Result<Self> {
        if inputs.nrows() != targets.nrows() {
            return Err(Error::invalid("inputs and targets differ in row count"));
        }
        let cache = gram(inputs, &params)?;
        let weights = cache.solve(targets);
        Ok(Self {
            inputs: rows_of(inputs),
            params,
            cache,
            weights,
        })
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn cache(&self) -> &GramCache {
        &self.cache
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.ncols()
    }

    fn kstar(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.inputs.len(),
            self.inputs.iter().map(|r| self.params.rbf(x, r)),
        )
    }

    pub fn mean(&self, x: &[f64]) -> DVector<f64> {
        self.weights.tr_mul(&self.kstar(x))
    }

    pub fn mean_and_variance(&self, x: &[f64]) -> (DVector<f64>, f64) {
        let k = self.kstar(x);
        let mean = self.weights.tr_mul(&k);
        let v = self.cache.half_solve(&k);
        (mean, clamp_variance(self.params.prior_variance() - v.dot(&v), &self.params))
    }

    /// Variance before clamping; exposed for numerical-health checks.
    pub fn raw_variance(&self, x: &[f64]) -> f64 {
        let v = self.cache.half_solve(&self.kstar(x));
        self.params.prior_variance() - v.dot(&v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn kernel_examples() {
        let p = KernelParams::new(1.0, 1.0, 1.0);
        assert_eq!(rbf_kernel(&[0.3], &[0.3], &p, true), 2.0);
        assert_relative_eq!(rbf_kernel(&[0.0], &[2.0], &p, false), (-2.0f64).exp());
        let q = KernelParams::new(2.0, 0.5, 4.0);
        let v = rbf_kernel(&[1.0, 0.0], &[0.0, 1.0], &q, false);
        assert_relative_eq!(v, 1.213_061_319_425_267, epsilon = 1e-12);
    }

    #[test]
    fn single_row_gram() {
        let c = gram(&DMatrix::from_element(1, 2, 0.7), &KernelParams::new(1.0, 1.0, 1.0)).unwrap();
        assert_eq!(c.gram()[(0, 0)], 2.0);
    }

    #[test]
    fn duplicated_rows_stay_positive_definite() {
        let x = DMatrix::from_row_slice(2, 1, &[0.5, 0.5]);
        let c = gram(&x, &KernelParams::new(1.5, 1.0, 10.0)).unwrap();
        assert_eq!(c.gram()[(0, 1)], 1.5);
        assert_eq!(c.gram()[(0, 0)], 1.6);
        assert!(c.log_det().is_finite());
    }

    #[test]
    fn gram_matches_elementwise_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_matrix(&mut rng, 3, 2);
        let p = KernelParams::new(1.3, 0.7, 20.0);
        let c = gram(&x, &p).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let a: Vec<f64> = x.row(i).iter().copied().collect();
                let b: Vec<f64> = x.row(j).iter().copied().collect();
                assert_eq!(c.gram()[(i, j)], rbf_kernel(&a, &b, &p, i == j));
            }
        }
        let l = c.chol();
        let ld: f64 = 2.0 * (0..3).map(|i| l[(i, i)].ln()).sum::<f64>();
        assert_relative_eq!(c.log_det(), ld, epsilon = 1e-14);
        assert_relative_eq!(c.log_det(), c.gram().determinant().ln(), epsilon = 1e-10);
        let recon = &l * l.transpose();
        assert!((recon - c.gram()).norm() / c.gram().norm() < 1e-10);
    }

    #[test]
    fn posterior_matches_dense_inverse() {
        let xs = [-1.0, -0.4, 0.1, 0.8, 1.7];
        let ys = [0.3, -0.2, 0.9, 1.1, -0.5];
        let x = DMatrix::from_column_slice(5, 1, &xs);
        let y = DMatrix::from_column_slice(5, 1, &ys);
        let p = KernelParams::new(1.2, 2.0, 50.0);
        let c = gram(&x, &p).unwrap();
        let inv = c.gram().clone().try_inverse().unwrap();
        for xstar in [-1.3, 0.0, 0.1, 0.55, 2.4] {
            let k = DVector::from_iterator(5, xs.iter().map(|xi| rbf_kernel(&[xstar], &[*xi], &p, false)));
            let mean = (y.transpose() * &inv * &k)[(0, 0)];
            let var = p.prior_variance() - (k.transpose() * &inv * &k)[(0, 0)];
            let (m, v) = gp_posterior(&[xstar], &x, &y, &c, &p);
            assert_relative_eq!(m[0], mean, epsilon = 1e-8);
            assert_relative_eq!(v, var, epsilon = 1e-8);
            let gp = GaussianProcess::fit(&x, &y, p).unwrap();
            let (m2, v2) = gp.mean_and_variance(&[xstar]);
            assert_relative_eq!(m2[0], mean, epsilon = 1e-8);
            assert_relative_eq!(v2, var, epsilon = 1e-8);
        }
    }

    #[test]
    fn posterior_limits() {
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 2.0]);
        let y = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -1.0, 0.5, 0.3, 0.0]);
        let p = KernelParams::new(1.0, 4.0, 1e6);
        let gp = GaussianProcess::fit(&x, &y, p).unwrap();
        // noise-dominated interpolation at a training row
        let m = gp.mean(&[1.0]);
        let target = DVector::from_row_slice(&[-1.0, 0.5]);
        assert!((m - &target).norm() <= 10.0 / p.noise_precision * target.norm());
        // far away: prior
        let (m, v) = gp.mean_and_variance(&[100.0]);
        assert!(m.norm() < 1e-12);
        assert_relative_eq!(v, p.prior_variance(), epsilon = 1e-12);
    }

    #[test]
    fn cholesky_solve_matches_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [2usize, 7, 20] {
            let x = random_matrix(&mut rng, n, 3);
            let c = gram(&x, &KernelParams::new(1.0, 0.8, 100.0)).unwrap();
            let b = random_matrix(&mut rng, n, 2);
            let via_chol = c.solve(&b);
            let via_inv = c.gram().clone().try_inverse().unwrap() * &b;
            assert!((&via_chol - &via_inv).norm() / via_inv.norm() < 1e-8);
        }
    }

    #[test]
    fn gram_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_matrix(&mut rng, 6, 2);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let xp = DMatrix::from_fn(6, 2, |i, j| x[(perm[i], j)]);
        let p = KernelParams::new(0.9, 1.1, 30.0);
        let a = gram(&x, &p).unwrap();
        let b = gram(&xp, &p).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(b.gram()[(i, j)], a.gram()[(perm[i], perm[j])]);
            }
        }
    }

    proptest! {
        #[test]
        fn kernel_is_symmetric(a in prop::collection::vec(-5.0f64..5.0, 3),
                               b in prop::collection::vec(-5.0f64..5.0, 3),
                               amp in 0.01f64..10.0, ils in 0.01f64..10.0) {
            let p = KernelParams::new(amp, ils, 5.0);
            prop_assert_eq!(rbf_kernel(&a, &b, &p, false), rbf_kernel(&b, &a, &p, false));
        }

        #[test]
        fn posterior_variance_nonnegative(seed in 0u64..200, probe in prop::collection::vec(-3.0f64..3.0, 2)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_matrix(&mut rng, 8, 2);
            let y = random_matrix(&mut rng, 8, 1);
            let p = KernelParams::new(rng.random_range(0.1..3.0), rng.random_range(0.1..3.0), rng.random_range(10.0..1e4));
            let gp = GaussianProcess::fit(&x, &y, p).unwrap();
            prop_assert!(gp.mean_and_variance(&probe).1 >= 0.0);
            prop_assert!(gp.raw_variance(&probe) >= -1e-8 * p.prior_variance());
        }
    }
}

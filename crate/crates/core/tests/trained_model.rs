//! Latent stepping and pose decoding on a small trained model.

use latentplan::dynamics::{decode_pose, latent_step_distribution};
use latentplan::lvm::train;
use latentplan::synth::{generate, GeneratorSpec, OracleKind};
use latentplan::{LatentDynamics, LatentModel, MotionDataset, TrainConfig};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

fn trained() -> &'static (MotionDataset, LatentModel) {
    static MODEL: OnceLock<(MotionDataset, LatentModel)> = OnceLock::new();
    MODEL.get_or_init(|| {
        let mut spec = GeneratorSpec::new(OracleKind::Circle, 8);
        spec.frames_per_cycle = 20;
        spec.cycles = 3;
        spec.noise_std = 0.01;
        spec.seed = 11;
        let data = generate(&spec).unwrap().dataset;
        let model = train(&data, &TrainConfig::new(2, 300)).unwrap();
        (data, model)
    })
}

fn row(m: &DMatrix<f64>, i: usize) -> DVector<f64> {
    m.row(i).transpose()
}

#[test]
fn mean_step_tracks_stored_successor() {
    let (_, model) = trained();
    let lat = model.latent();
    let noise = 1.0 / model.dynamics_params().noise_precision;
    let pairs = model.transitions();
    let mse = pairs
        .iter()
        .map(|&(i, j)| (model.step(&row(lat, i)).0 - row(lat, j)).norm_squared() / lat.ncols() as f64)
        .sum::<f64>()
        / pairs.len() as f64;
    // per-dimension residual no larger than a few model noise standard deviations
    assert!(mse.sqrt() < 3.0 * noise.sqrt(), "rms {} vs noise sd {}", mse.sqrt(), noise.sqrt());
}

#[test]
fn decoded_training_points_match_observations() {
    let (data, model) = trained();
    let lat = model.latent();
    let sd = (1.0 / model.mapping_params().noise_precision).sqrt();
    let d = data.dim() as f64;
    let mut total = 0.0;
    for i in 0..data.len() {
        let err = decode_pose(model, &row(lat, i)) - row(&data.observations, i);
        let rms = (err.norm_squared() / d).sqrt();
        assert!(rms < 5.0 * sd, "frame {i}: rms {rms} vs sd {sd}");
        total += rms;
    }
    assert!(total / (data.len() as f64) < 2.0 * sd);
}

#[test]
fn far_from_data_reverts_to_prior() {
    let (_, model) = trained();
    let far = DVector::from_element(model.latent_dim(), 1e3);
    let (mean, cov) = latent_step_distribution(model, &far);
    assert!(mean.amax() < 1e-12);
    let p = model.dynamics_params();
    let prior = p.amplitude + 1.0 / p.noise_precision;
    for i in 0..cov.nrows() {
        assert!((cov[(i, i)] - prior).abs() <= 1e-12 * prior);
    }
    let pose = decode_pose(model, &far);
    assert!((pose - model.offsets()).amax() < 1e-12);
}

#[test]
fn decoder_respects_kernel_lipschitz_bound() {
    let (_, model) = trained();
    let p = model.mapping_params();
    // mean_j(x) = sum_i a_ij k(x, x_i); |grad k| <= amp * sqrt(gamma) * exp(-1/2)
    let centered = model.observations().map_with_location(|_, j, v| v - model.offsets()[j]);
    let a = model.mapping_gp().cache().solve(&centered);
    let per_kernel = p.amplitude * p.inverse_lengthscale.sqrt() * (-0.5f64).exp();
    let lip = a.column_iter().map(|c| (per_kernel * c.abs().sum()).powi(2)).sum::<f64>().sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let lat = model.latent();
    for _ in 0..500 {
        let base = row(lat, rng.random_range(0..lat.nrows()));
        let x = base.map(|v| v + rng.random_range(-0.5..0.5));
        let eps = DVector::from_fn(x.len(), |_, _| rng.random_range(-1e-3..1e-3));
        let diff = (decode_pose(model, &(&x + &eps)) - decode_pose(model, &x)).norm();
        assert!(diff <= lip * eps.norm() * (1.0 + 1e-9), "{diff} > {} ", lip * eps.norm());
    }
}

#[test]
fn step_variance_nonnegative_everywhere() {
    let (_, model) = trained();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..1000 {
        let x = DVector::from_fn(model.latent_dim(), |_, _| rng.random_range(-5.0..5.0));
        let (_, cov) = latent_step_distribution(model, &x);
        assert!(cov.diagonal().iter().all(|v| *v >= 0.0));
    }
}

#[test]
fn mean_rollout_stays_near_training_path() {
    let (_, model) = trained();
    let lat = model.latent();
    let pairs = model.transitions();
    let sigma = pairs.iter().map(|&(i, _)| model.step(&row(lat, i)).1.sqrt()).sum::<f64>() / pairs.len() as f64;
    let mut x = row(lat, 0);
    for _ in 0..20 {
        x = model.step(&x).0;
        let dist = (0..lat.nrows() - 1)
            .map(|i| {
                let a = row(lat, i);
                let ab = row(lat, i + 1) - &a;
                let t = ((&x - &a).dot(&ab) / ab.norm_squared().max(1e-300)).clamp(0.0, 1.0);
                (&x - (a + ab * t)).norm()
            })
            .fold(f64::INFINITY, f64::min);
        assert!(dist <= 3.0 * sigma, "distance {dist} exceeds 3 sigma {}", 3.0 * sigma);
    }
}

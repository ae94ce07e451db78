#![allow(dead_code)]

use fematch::sampler::LangevinConfig;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// AR(1) series with autocorrelation `exp(−1/tau)` per frame and unit variance.
pub fn ou_series(n: usize, tau: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let a = (-1.0 / tau).exp();
    let s = (1.0 - a * a).sqrt();
    let mut x: f64 = rng.sample(StandardNormal);
    (0..n)
        .map(|_| {
            let v = x;
            let z: f64 = rng.sample(StandardNormal);
            x = a * x + s * z;
            v
        })
        .collect()
}

/// Slow (τ = 100) and fast (τ = 1) OU components mixed into two features.
pub fn mixed_ou(n: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut r = rng(seed);
    let slow = ou_series(n, 100.0, &mut r);
    let fast = ou_series(n, 1.0, &mut r);
    let mix = DMatrix::from_row_slice(2, 2, &[1.0, 0.8, 0.5, 1.0]);
    let frames = DMatrix::from_fn(n, 2, |t, k| mix[(k, 0)] * slow[t] + mix[(k, 1)] * fast[t]);
    (frames, mix)
}

pub fn normals(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| r.sample(StandardNormal)).collect()
}

pub fn langevin(start: Vec<Vec<f64>>, steps: u64, dt: f64, stride: u64, seed: u64) -> LangevinConfig {
    LangevinConfig {
        dt,
        gamma: 1.0,
        temperature: 300.0,
        n_steps: steps,
        stride,
        seed,
        initial_positions: start,
    }
}

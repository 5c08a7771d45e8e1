#![allow(dead_code)]

pub mod dsm_loss;
pub mod grid;
pub mod suites;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type TestRng = ChaCha8Rng;

pub fn rng(seed: u64) -> TestRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vec(d: usize, rng: &mut TestRng) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal))
}

pub fn gaussian_mat(r: usize, c: usize, rng: &mut TestRng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal))
}

/// `B Bᵀ/d + δI` with a random scale, well conditioned enough for 1e-8 checks.
pub fn random_spd(d: usize, rng: &mut TestRng) -> DMatrix<f64> {
    let b = gaussian_mat(d, d, rng);
    let scale = 10f64.powf(rng.random_range(-1.0..1.0));
    (&b * b.transpose() / d as f64 + DMatrix::identity(d, d) * 0.3) * scale
}

/// Block-diagonal SPD matrix with the given block sizes.
pub fn random_block_spd(sizes: &[usize], rng: &mut TestRng) -> DMatrix<f64> {
    let d: usize = sizes.iter().sum();
    let mut m = DMatrix::zeros(d, d);
    let mut s = 0;
    for &l in sizes {
        m.view_mut((s, s), (l, l)).copy_from(&random_spd(l, rng));
        s += l;
    }
    m
}

/// Random composition of `d` into at least two blocks (or one when `d = 1`).
pub fn random_sizes(d: usize, rng: &mut TestRng) -> Vec<usize> {
    let mut out = Vec::new();
    let mut left = d;
    while left > 0 {
        let l = rng.random_range(1..=left.min(3));
        out.push(l);
        left -= l;
    }
    out
}

pub fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

pub fn rel_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

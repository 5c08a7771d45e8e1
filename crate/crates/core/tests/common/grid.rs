//! Brute-force posterior moments by quadrature on a dense grid.

use nalgebra::{DMatrix, DVector};

/// Mean and covariance of the density `∝ exp(log_density(x))` on a regular
/// grid of `points` nodes per axis covering `center ± half_width` (1 or 2
/// dimensions).
pub fn grid_moments(
    center: &DVector<f64>,
    half_width: &DVector<f64>,
    points: usize,
    log_density: impl Fn(&DVector<f64>) -> f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let d = center.len();
    assert!(d == 1 || d == 2, "grid oracle supports 1 or 2 dimensions");
    let axis = |j: usize| -> Vec<f64> {
        (0..points)
            .map(|i| center[j] - half_width[j] + 2.0 * half_width[j] * i as f64 / (points - 1) as f64)
            .collect()
    };
    let nodes: Vec<DVector<f64>> = if d == 1 {
        axis(0).into_iter().map(|a| DVector::from_element(1, a)).collect()
    } else {
        let (ax, ay) = (axis(0), axis(1));
        ax.iter()
            .flat_map(|a| ay.iter().map(move |b| DVector::from_vec(vec![*a, *b])))
            .collect()
    };
    let logs: Vec<f64> = nodes.iter().map(&log_density).collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut mean = DVector::zeros(d);
    for (x, wi) in nodes.iter().zip(&w) {
        mean += x * (*wi / total);
    }
    let mut cov = DMatrix::zeros(d, d);
    for (x, wi) in nodes.iter().zip(&w) {
        let e = x - &mean;
        cov += &e * e.transpose() * (*wi / total);
    }
    (mean, cov)
}

/// `ln N(x; m, P)` up to a constant.
pub fn gaussian_log_kernel(x: &DVector<f64>, m: &DVector<f64>, p_inv: &DMatrix<f64>) -> f64 {
    let e = x - m;
    -0.5 * e.dot(&(p_inv * &e))
}

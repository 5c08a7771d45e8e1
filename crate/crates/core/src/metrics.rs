//! RMSE, the q-logarithm, the q-information criterion and interval coverage.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{check_dim, Error, Result};
use crate::linalg::SpdFactor;

/// Default deformation parameter of the q-information criterion.
pub const DEFAULT_Q: f64 = 0.9;

fn check_shapes(truth: &DMatrix<f64>, estimate: &DMatrix<f64>) -> Result<()> {
    check_dim("estimate rows", truth.nrows(), estimate.nrows())?;
    check_dim("estimate columns", truth.ncols(), estimate.ncols())
}

/// Root mean squared error over all time steps (columns) and dimensions (rows).
pub fn rmse(truth: &DMatrix<f64>, estimate: &DMatrix<f64>) -> Result<f64> {
    check_shapes(truth, estimate)?;
    if truth.is_empty() {
        return Err(Error::InvalidParameter("rmse of an empty trajectory".into()));
    }
    Ok(((truth - estimate).norm_squared() / truth.len() as f64).sqrt())
}

/// RMSE of each time step over dimensions.
pub fn rmse_per_step(truth: &DMatrix<f64>, estimate: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_shapes(truth, estimate)?;
    let d = truth.nrows() as f64;
    Ok((truth - estimate)
        .column_iter()
        .map(|c| (c.norm_squared() / d).sqrt())
        .collect())
}

/// `1 − q`, snapped to its decimal value when the subtraction is off by a
/// rounding error, so that e.g. `1 − 0.9` is exactly `0.1`.
fn one_minus(q: f64) -> f64 {
    let raw = 1.0 - q;
    let snapped = (raw * 1e12).round() / 1e12;
    if (snapped - raw).abs() <= 4.0 * f64::EPSILON * raw.abs().max(f64::MIN_POSITIVE) {
        snapped
    } else {
        raw
    }
}

/// `log_q(x) = (x^{1−q} − 1)/(1 − q)` for `x ≥ 0`; equals `−1/(1−q)` at 0.
pub fn q_log(x: f64, q: f64) -> f64 {
    let a = one_minus(q);
    (x.powf(a) - 1.0) / a
}

/// `log_q` evaluated from `ln x`. Underflow of `x` gives the finite limit.
pub fn q_log_from_ln(ln_x: f64, q: f64) -> f64 {
    let a = one_minus(q);
    ((a * ln_x).exp() - 1.0) / a
}

/// Log-density of `N(mean, cov)` at `x`, optionally ignoring off-diagonal
/// covariance entries.
pub fn gaussian_log_density(
    x: &DVector<f64>,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    diagonalize: bool,
) -> Result<f64> {
    check_dim("density mean", x.len(), mean.len())?;
    check_dim("density covariance", x.len(), cov.nrows())?;
    let d = x.len() as f64;
    let r = x - mean;
    let (logdet, maha) = if diagonalize {
        let diag = cov.diagonal();
        if diag.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::NotPositiveDefinite {
                what: "diagonalized covariance",
            });
        }
        (
            diag.iter().map(|v| v.ln()).sum::<f64>(),
            r.iter().zip(diag.iter()).map(|(e, v)| e * e / v).sum::<f64>(),
        )
    } else {
        let f = SpdFactor::named(cov.clone(), "covariance")?;
        (f.log_det(), f.mahalanobis_sq(&r))
    };
    Ok(-0.5 * (d * (2.0 * std::f64::consts::PI).ln() + logdet + maha))
}

/// Per-step contributions `−log_q N(x_true; m, P)`; each is at most `1/(1−q)`.
pub fn q_ic_per_step(
    truth: &DMatrix<f64>,
    means: &[DVector<f64>],
    covariances: &[DMatrix<f64>],
    q: f64,
    diagonalize: bool,
) -> Result<Vec<f64>> {
    check_dim("means", truth.ncols(), means.len())?;
    check_dim("covariances", truth.ncols(), covariances.len())?;
    (0..truth.ncols())
        .map(|k| {
            let x = truth.column(k).into_owned();
            let ln_p = gaussian_log_density(&x, &means[k], &covariances[k], diagonalize)?;
            Ok(-q_log_from_ln(ln_p, q))
        })
        .collect()
}

/// `−(1/n) Σ_k log_q N(x_true,k; m_k, P_k)`.
pub fn q_ic(
    truth: &DMatrix<f64>,
    means: &[DVector<f64>],
    covariances: &[DMatrix<f64>],
    q: f64,
    diagonalize: bool,
) -> Result<f64> {
    let steps = q_ic_per_step(truth, means, covariances, q, diagonalize)?;
    if steps.is_empty() {
        return Err(Error::InvalidParameter("q-IC of an empty trajectory".into()));
    }
    Ok(steps.iter().sum::<f64>() / steps.len() as f64)
}

/// Fraction of (time, dimension) pairs whose truth lies in the central
/// marginal interval of probability `level`.
pub fn ci_coverage(
    truth: &DMatrix<f64>,
    means: &[DVector<f64>],
    covariances: &[DMatrix<f64>],
    level: f64,
) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidParameter(format!("coverage level must lie in (0, 1), got {level}")));
    }
    check_dim("means", truth.ncols(), means.len())?;
    check_dim("covariances", truth.ncols(), covariances.len())?;
    let z = Normal::standard().inverse_cdf(0.5 + 0.5 * level);
    let mut inside = 0usize;
    for (k, col) in truth.column_iter().enumerate() {
        check_dim("mean", col.len(), means[k].len())?;
        for i in 0..col.len() {
            let sd = covariances[k][(i, i)].max(0.0).sqrt();
            if (col[i] - means[k][i]).abs() <= z * sd {
                inside += 1;
            }
        }
    }
    Ok(inside as f64 / truth.len() as f64)
}

/// Summary metrics of one filter run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub rmse: f64,
    pub q_ic: f64,
    pub rmse_per_step: Vec<f64>,
    pub q_ic_per_step: Vec<f64>,
    pub ci_coverage_95: f64,
}

impl MetricReport {
    /// `truth` holds one column per estimate.
    pub fn compute(
        truth: &DMatrix<f64>,
        means: &[DVector<f64>],
        covariances: &[DMatrix<f64>],
        diagonalize: bool,
    ) -> Result<Self> {
        check_dim("means", truth.ncols(), means.len())?;
        let estimate = DMatrix::from_fn(truth.nrows(), truth.ncols(), |i, k| means[k][i]);
        let q_steps = q_ic_per_step(truth, means, covariances, DEFAULT_Q, diagonalize)?;
        let q_ic = q_steps.iter().sum::<f64>() / q_steps.len().max(1) as f64;
        Ok(Self {
            rmse: rmse(truth, &estimate)?,
            q_ic,
            rmse_per_step: rmse_per_step(truth, &estimate)?,
            q_ic_per_step: q_steps,
            ci_coverage_95: ci_coverage(truth, means, covariances, 0.95)?,
        })
    }
}

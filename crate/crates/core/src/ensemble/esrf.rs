use nalgebra::{DMatrix, DVector};

use super::{observation_terms, EnsembleAnalysis, EnsembleState, EnsembleUpdate};
use crate::error::{check_dim, Error, Result};
use crate::lgss::LinearObservation;
use crate::linalg::{psd_sqrt, SpdFactor};

/// Eigenvalues of the transform bracket below `-BRACKET_TOL` signal breakdown.
const BRACKET_TOL: f64 = 1e-8;

/// Deterministic square-root update. The mean follows the (robust) Kalman
/// update of `x̄`; anomalies are right-multiplied by the symmetric root of
/// `I − (HX)ᵀ(H P_M Hᵀ + N)⁻¹ HX / (M − 1)`, which reproduces the analysis
/// covariance `P_M − K̃ H P_M` exactly.
pub fn esrf_analysis(
    ensemble: &EnsembleState,
    observation: &LinearObservation,
    y: &DVector<f64>,
    update: &EnsembleUpdate,
) -> Result<EnsembleAnalysis> {
    let h = observation.h();
    let r = observation.r();
    check_dim("ensemble state", h.ncols(), ensemble.dim())?;
    check_dim("observation", h.nrows(), y.len())?;
    let m = ensemble.size();
    if m < 2 {
        return Err(Error::InvalidParameter("ESRF needs at least two members".into()));
    }
    let pm = ensemble.covariance()?;
    let hx = h * ensemble.anomalies();
    let hph = h * &pm * h.transpose();
    let center = h * ensemble.mean();
    let terms = observation_terms(update, y, &center, &(&hph + r), r, false)?;
    let s = SpdFactor::named(&hph + &terms.n, "innovation covariance")?;

    let pht = &pm * h.transpose();
    let k = s.solve_mat(&pht.transpose()).transpose();
    let mean = ensemble.mean() - &k * (&center - &terms.y_tilde);

    let bracket = DMatrix::identity(m, m) - hx.transpose() * s.solve_mat(&hx) / (m as f64 - 1.0);
    let root = psd_sqrt(&bracket, BRACKET_TOL)?;
    let anomalies = ensemble.anomalies() * root;
    Ok(EnsembleAnalysis {
        ensemble: EnsembleState::from_mean_and_anomalies(&mean, &anomalies)?,
        k_sq: terms.eval.mean_k_sq(),
    })
}

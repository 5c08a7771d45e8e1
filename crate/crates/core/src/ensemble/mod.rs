//! Ensemble filters: perturbed-observation EnKF, ensemble square-root
//! filter and LETKF, each with regular, DSM and WoLF analysis variants.

mod enkf;
mod esrf;
mod letkf;
mod state;

pub use enkf::{enkf_apply_frozen, enkf_perturbed_analysis, KernelMode};
pub use esrf::esrf_analysis;
pub use letkf::{
    anomaly_analysis, inflated_anomaly_covariance, letkf_analysis, AnomalyAnalysis, LetkfConfig,
    Localization, TaperConvention,
};
pub use state::{ensemble_forecast, EnsembleState};

use nalgebra::{DMatrix, DVector};

use crate::analysis::{dsm_observation_terms, WolfSpec};
use crate::error::{Error, Result};
use crate::linalg::SpdFactor;
use crate::weights::{Standardization, WeightEvaluation, WeightKernelSpec};

/// Analysis variant shared by the ensemble filters.
#[derive(Debug, Clone, PartialEq)]
pub enum EnsembleUpdate {
    Regular,
    Dsm(WeightKernelSpec),
    Wolf(WolfSpec),
}

/// Ensemble after an analysis step, with the weight that was applied.
#[derive(Debug, Clone)]
pub struct EnsembleAnalysis {
    pub ensemble: EnsembleState,
    /// Mean `k²` over blocks, members or local analyses. The regular
    /// update reports 1/2 and WoLF reports `r²/2`.
    pub k_sq: f64,
}

/// Effective observation covariance and observation of one update.
#[derive(Debug, Clone)]
pub(crate) struct ObsTerms {
    pub eval: WeightEvaluation,
    pub n: DMatrix<f64>,
    pub y_tilde: DVector<f64>,
}

/// Builds `(N, ỹ)` for `update` with the kernel centered at `center`.
///
/// `marginal` standardizes the Marginal and ObsAnomaly modes (and the
/// Σ-scaled WoLF weight); the Conditional mode uses `r`. When
/// `force_conditional` is set every kernel is standardized by `r`.
pub(crate) fn observation_terms(
    update: &EnsembleUpdate,
    y: &DVector<f64>,
    center: &DVector<f64>,
    marginal: &DMatrix<f64>,
    r: &DMatrix<f64>,
    force_conditional: bool,
) -> Result<ObsTerms> {
    let pick = |mode: Standardization| -> Result<SpdFactor> {
        if force_conditional || mode == Standardization::Conditional {
            SpdFactor::named(r.clone(), "observation noise covariance")
        } else {
            SpdFactor::named(marginal.clone(), "innovation covariance")
        }
    };
    match update {
        EnsembleUpdate::Regular => Ok(ObsTerms {
            eval: WeightEvaluation::gradient_free(0.5, f64::NAN, y.len()),
            n: r.clone(),
            y_tilde: y.clone(),
        }),
        EnsembleUpdate::Dsm(spec) => {
            let std_cov = pick(spec.standardization())?;
            let (eval, n, y_tilde) = dsm_observation_terms(spec, y, center, &std_cov, r)?;
            Ok(ObsTerms { eval, n, y_tilde })
        }
        EnsembleUpdate::Wolf(spec) => {
            let std_cov = pick(spec.standardization())?;
            let s = std_cov.mahalanobis_sq(&(y - center));
            let r_sq = spec.weight_sq(s);
            if !(r_sq > 0.0) {
                return Err(Error::Numerical(format!("WoLF weight vanished at residual {s}")));
            }
            Ok(ObsTerms {
                eval: WeightEvaluation::gradient_free(0.5 * r_sq, s, y.len()),
                n: r / r_sq,
                y_tilde: y.clone(),
            })
        }
    }
}

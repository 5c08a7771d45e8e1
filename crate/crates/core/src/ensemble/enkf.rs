use nalgebra::{DMatrix, DVector};

use super::{observation_terms, EnsembleAnalysis, EnsembleState, EnsembleUpdate};
use crate::dynamics::standard_normal_vec;
use crate::error::{check_dim, Error, Result};
use crate::lgss::LinearObservation;
use crate::linalg::SpdFactor;
use crate::rng::SimRng;

/// Where the weight kernel of the perturbed-observation EnKF is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum KernelMode {
    /// Once, at `H x̄`, standardized by `H P_M Hᵀ + R`.
    #[default]
    AverageParticle,
    /// Per member, at `H x⁽ⁱ⁾`, standardized by `R`.
    PerParticle,
}

fn gain(pm: &DMatrix<f64>, h: &DMatrix<f64>, n: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let pht = pm * h.transpose();
    let s = SpdFactor::named(h * &pht + n, "innovation covariance")?;
    Ok(s.solve_mat(&pht.transpose()).transpose())
}

fn perturbed_member(
    x: &DVector<f64>,
    h: &DMatrix<f64>,
    k: &DMatrix<f64>,
    n_lower: &DMatrix<f64>,
    y_tilde: &DVector<f64>,
    rng: &mut SimRng,
) -> DVector<f64> {
    let xi = n_lower * standard_normal_vec(h.nrows(), rng);
    x - k * (h * x + xi - y_tilde)
}

/// Stochastic EnKF: `x⁽ⁱ⁾ ← x⁽ⁱ⁾ − K̃(H x⁽ⁱ⁾ + ξ⁽ⁱ⁾ − ỹ)` with
/// `ξ⁽ⁱ⁾ ~ N(0, N)` and `K̃ = P_M Hᵀ(N + H P_M Hᵀ)⁻¹`.
pub fn enkf_perturbed_analysis(
    ensemble: &EnsembleState,
    observation: &LinearObservation,
    y: &DVector<f64>,
    update: &EnsembleUpdate,
    mode: KernelMode,
    rng: &mut SimRng,
) -> Result<EnsembleAnalysis> {
    let h = observation.h();
    let r = observation.r();
    check_dim("ensemble state", h.ncols(), ensemble.dim())?;
    check_dim("observation", h.nrows(), y.len())?;
    if ensemble.size() < 2 {
        return Err(Error::InvalidParameter("EnKF needs at least two members".into()));
    }
    let pm = ensemble.covariance()?;
    let hph = h * &pm * h.transpose();
    let mut members = ensemble.members().clone();
    let k_sq = match (mode, update) {
        (KernelMode::AverageParticle, _) | (_, EnsembleUpdate::Regular) => {
            let center = h * ensemble.mean();
            let terms = observation_terms(update, y, &center, &(&hph + r), r, false)?;
            let k = gain(&pm, h, &terms.n)?;
            let n_lower = SpdFactor::named(terms.n.clone(), "rescaled covariance")?
                .lower()
                .clone();
            for mut col in members.column_iter_mut() {
                let x = col.clone_owned();
                col.copy_from(&perturbed_member(&x, h, &k, &n_lower, &terms.y_tilde, rng));
            }
            terms.eval.mean_k_sq()
        }
        (KernelMode::PerParticle, _) => {
            let mut total = 0.0;
            for mut col in members.column_iter_mut() {
                let x = col.clone_owned();
                let center = h * &x;
                let terms = observation_terms(update, y, &center, &(&hph + r), r, true)?;
                let k = gain(&pm, h, &terms.n)?;
                let n_lower = SpdFactor::named(terms.n.clone(), "rescaled covariance")?
                    .lower()
                    .clone();
                col.copy_from(&perturbed_member(&x, h, &k, &n_lower, &terms.y_tilde, rng));
                total += terms.eval.mean_k_sq();
            }
            total / ensemble.size() as f64
        }
    };
    Ok(EnsembleAnalysis {
        ensemble: EnsembleState::new(members)?,
        k_sq,
    })
}

/// Perturbed-observation update with a gain, `N` and `ỹ` fixed in advance.
pub fn enkf_apply_frozen(
    ensemble: &EnsembleState,
    h: &DMatrix<f64>,
    gain: &DMatrix<f64>,
    n: &DMatrix<f64>,
    y_tilde: &DVector<f64>,
    rng: &mut SimRng,
) -> Result<EnsembleState> {
    check_dim("gain rows", ensemble.dim(), gain.nrows())?;
    check_dim("gain cols", h.nrows(), gain.ncols())?;
    let n_lower = SpdFactor::named(n.clone(), "rescaled covariance")?
        .lower()
        .clone();
    let mut members = ensemble.members().clone();
    for mut col in members.column_iter_mut() {
        let x = col.clone_owned();
        col.copy_from(&perturbed_member(&x, h, gain, &n_lower, y_tilde, rng));
    }
    EnsembleState::new(members)
}

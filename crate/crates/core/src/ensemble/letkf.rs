//! Local ensemble transform Kalman filter.
//!
//! The analysis is solved in the `M`-dimensional span of the forecast
//! anomalies. For the robust variants the observation covariance becomes
//! `N` and the innovation uses the corrected observation `ỹ`:
//!
//! ```text
//! P̃ = [(M−1)/ρ · I + Yᵀ N⁻¹ Y]⁻¹
//! v̄ = P̃ Yᵀ N⁻¹ (ỹ − ȳ)
//! W = [(M−1) P̃]^{1/2}
//! ```
//!
//! With localization each state index on the ring gets its own analysis
//! from a cyclic window of nearby observations whose precision is tapered
//! by `exp(−d²/L²)`.

use nalgebra::{DMatrix, DVector};

use super::{observation_terms, EnsembleAnalysis, EnsembleState, EnsembleUpdate};
use crate::error::{check_dim, Error, Result};
use crate::lgss::ObservationMap;
use crate::linalg::{psd_sqrt, symmetrize_mut, SpdFactor};

/// Tolerance for negative eigenvalues of `(M−1)P̃` before its square root.
const TRANSFORM_TOL: f64 = 1e-10;

/// How the taper enters the local observation covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum TaperConvention {
    /// Precision is multiplied by the taper (distant observations count less).
    #[default]
    Precision,
    /// Covariance is multiplied by the taper. Kept only for comparison; it
    /// makes distant observations more trusted.
    Covariance,
}

/// Cyclic R-localization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Localization {
    /// Observations on each side of the analyzed index.
    pub half_width: usize,
    pub taper_length: f64,
    pub convention: TaperConvention,
}

impl Localization {
    pub fn new(half_width: usize, taper_length: f64) -> Result<Self> {
        if !(taper_length > 0.0 && taper_length.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "taper length must be positive, got {taper_length}"
            )));
        }
        Ok(Self {
            half_width,
            taper_length,
            convention: TaperConvention::Precision,
        })
    }

    pub fn with_convention(mut self, convention: TaperConvention) -> Self {
        self.convention = convention;
        self
    }

    /// Indices of the window around `center` on a ring of `d` sites, with
    /// their cyclic distances to `center`.
    pub fn window(&self, center: usize, d: usize) -> Vec<(usize, usize)> {
        let w = self.half_width.min((d - 1) / 2);
        let mut out = Vec::with_capacity(2 * w + 1);
        for off in 0..=2 * w {
            let shift = off as isize - w as isize;
            let i = (center as isize + shift).rem_euclid(d as isize) as usize;
            out.push((i, shift.unsigned_abs()));
        }
        out
    }

    pub fn taper(&self, distance: usize) -> f64 {
        let d = distance as f64;
        (-(d * d) / (self.taper_length * self.taper_length)).exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LetkfConfig {
    pub inflation: f64,
    pub localization: Option<Localization>,
    /// Run one local analysis per state index. Without it the localization
    /// is ignored and a single global analysis is done.
    pub per_state_window: bool,
}

impl LetkfConfig {
    pub fn global() -> Self {
        Self {
            inflation: 1.0,
            localization: None,
            per_state_window: false,
        }
    }

    pub fn localized(inflation: f64, localization: Localization) -> Self {
        Self {
            inflation,
            localization: Some(localization),
            per_state_window: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.inflation >= 1.0 && self.inflation.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "inflation must be at least 1, got {}",
                self.inflation
            )));
        }
        Ok(())
    }
}

/// Solution of the analysis in anomaly space.
#[derive(Debug, Clone)]
pub struct AnomalyAnalysis {
    pub p_tilde: DMatrix<f64>,
    pub v_bar: DVector<f64>,
    /// Symmetric `W` with `W Wᵀ = (M−1) P̃`.
    pub transform: DMatrix<f64>,
}

/// `[(M−1)/ρ · I + precision_term]⁻¹`, where `precision_term = Yᵀ N⁻¹ Y`.
pub fn inflated_anomaly_covariance(
    precision_term: &DMatrix<f64>,
    members: usize,
    inflation: f64,
) -> Result<DMatrix<f64>> {
    if !(inflation >= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "inflation must be at least 1, got {inflation}"
        )));
    }
    check_dim("anomaly precision", members, precision_term.nrows())?;
    let mut a = precision_term.clone();
    let diag = (members as f64 - 1.0) / inflation;
    for i in 0..members {
        a[(i, i)] += diag;
    }
    Ok(SpdFactor::named(a, "anomaly-space precision")?.inverse())
}

/// Anomaly-space analysis for observation anomalies `y_anom` (`d × M`),
/// effective covariance `n` and innovation `ỹ − ȳ`.
pub fn anomaly_analysis(
    y_anom: &DMatrix<f64>,
    n: &DMatrix<f64>,
    innovation: &DVector<f64>,
    inflation: f64,
) -> Result<AnomalyAnalysis> {
    let m = y_anom.ncols();
    check_dim("effective covariance", y_anom.nrows(), n.nrows())?;
    check_dim("innovation", y_anom.nrows(), innovation.len())?;
    let nf = SpdFactor::named(n.clone(), "local observation covariance")?;
    let ninv_y = nf.solve_mat(y_anom);
    let mut precision_term = y_anom.transpose() * &ninv_y;
    symmetrize_mut(&mut precision_term);
    let p_tilde = inflated_anomaly_covariance(&precision_term, m, inflation)?;
    let v_bar = &p_tilde * (ninv_y.transpose() * innovation);
    let transform = psd_sqrt(&(&p_tilde * (m as f64 - 1.0)), TRANSFORM_TOL)?;
    Ok(AnomalyAnalysis {
        p_tilde,
        v_bar,
        transform,
    })
}

/// One local (or global) problem: observation anomalies, mean, observation
/// and observation covariance restricted to the selected indices.
fn solve_local(
    y_anom: &DMatrix<f64>,
    y_mean: &DVector<f64>,
    y: &DVector<f64>,
    r: &DMatrix<f64>,
    update: &EnsembleUpdate,
    inflation: f64,
) -> Result<(AnomalyAnalysis, f64)> {
    let m = y_anom.ncols() as f64;
    let sigma_y = y_anom * y_anom.transpose() / (m - 1.0) + r;
    let terms = observation_terms(update, y, y_mean, &sigma_y, r, false)?;
    let innovation = &terms.y_tilde - y_mean;
    let aa = anomaly_analysis(y_anom, &terms.n, &innovation, inflation)?;
    Ok((aa, terms.eval.mean_k_sq()))
}

/// LETKF analysis with regular, DSM or WoLF weighting.
///
/// `ȳ = h(x̄)` and `Y⁽ⁱ⁾ = h(x⁽ⁱ⁾) − ȳ`. The DSM kernel is standardized by
/// `Σ_Y = Y Yᵀ/(M−1) + R` and centered at `ȳ`. With localization the
/// observations must live on the same ring as the state (`d_Y = d_X`).
pub fn letkf_analysis(
    ensemble: &EnsembleState,
    observation: &dyn ObservationMap,
    r: &DMatrix<f64>,
    y: &DVector<f64>,
    update: &EnsembleUpdate,
    config: &LetkfConfig,
) -> Result<EnsembleAnalysis> {
    config.validate()?;
    let m = ensemble.size();
    if m < 2 {
        return Err(Error::InvalidParameter("LETKF needs at least two members".into()));
    }
    let d_y = observation.obs_dim();
    check_dim("observation", d_y, y.len())?;
    check_dim("observation covariance", d_y, r.nrows())?;
    let y_mean = observation.apply(ensemble.mean());
    let mut y_anom = DMatrix::zeros(d_y, m);
    for i in 0..m {
        let yi = observation.apply(&ensemble.member(i));
        y_anom.set_column(i, &(yi - &y_mean));
    }
    let x_anom = ensemble.anomalies();

    let localization = match (config.localization, config.per_state_window) {
        (Some(loc), true) => loc,
        _ => {
            let (aa, k_sq) = solve_local(&y_anom, &y_mean, y, r, update, config.inflation)?;
            let mean = ensemble.mean() + x_anom * &aa.v_bar;
            let anomalies = x_anom * &aa.transform;
            return Ok(EnsembleAnalysis {
                ensemble: EnsembleState::from_mean_and_anomalies(&mean, &anomalies)?,
                k_sq,
            });
        }
    };

    let d_x = ensemble.dim();
    check_dim("localized observations on the state ring", d_x, d_y)?;
    let mut members = DMatrix::zeros(d_x, m);
    let mut k_total = 0.0;
    for j in 0..d_x {
        let window = localization.window(j, d_y);
        let idx: Vec<usize> = window.iter().map(|&(i, _)| i).collect();
        let taper: Vec<f64> = window
            .iter()
            .map(|&(_, dist)| localization.taper(dist))
            .collect();
        let l = idx.len();
        let ya = y_anom.select_rows(&idx);
        let ym = y_mean.select_rows(&idx);
        let yl = y.select_rows(&idx);
        let r_loc = DMatrix::from_fn(l, l, |a, b| {
            let scale = (taper[a] * taper[b]).sqrt();
            match localization.convention {
                TaperConvention::Precision => r[(idx[a], idx[b])] / scale,
                TaperConvention::Covariance => r[(idx[a], idx[b])] * scale,
            }
        });
        let (aa, k_sq) = solve_local(&ya, &ym, &yl, &r_loc, update, config.inflation)?;
        k_total += k_sq;
        let row = x_anom.row(j);
        let mean_j = ensemble.mean()[j] + (row * &aa.v_bar)[0];
        let anom_j = row * &aa.transform;
        for i in 0..m {
            members[(j, i)] = mean_j + anom_j[i];
        }
    }
    Ok(EnsembleAnalysis {
        ensemble: EnsembleState::new(members)?,
        k_sq: k_total / d_x as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_has_expected_size_and_distances() {
        let loc = Localization::new(19, 5.45).unwrap();
        let w = loc.window(0, 40);
        assert_eq!(w.len(), 39);
        assert_eq!(w[19], (0, 0));
        assert_eq!(w[0], (21, 19));
        assert_eq!(w[38], (19, 19));
        let small = Localization::new(10, 1.0).unwrap().window(2, 5);
        assert_eq!(small.len(), 5);
    }

    #[test]
    fn inflation_with_no_data() {
        let zero = DMatrix::zeros(6, 6);
        let p = inflated_anomaly_covariance(&zero, 6, 1.06).unwrap();
        let expect = DMatrix::identity(6, 6) * (1.06 / 5.0);
        assert!((p - expect).norm() < 1e-15);
        assert!(inflated_anomaly_covariance(&zero, 6, 0.9).is_err());
    }
}

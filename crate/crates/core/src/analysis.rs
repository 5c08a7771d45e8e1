//! Robust analysis steps in closed form.
//!
//! The DSM step evaluates the weight kernel at the forecast observation
//! `H m^f`, rescales the observation covariance to `N = R/(2k²)` and shifts
//! the observation to `ỹ = y − 2N∇k²`. The result is again Gaussian, so the
//! update is a Kalman update with `(N, ỹ)` in place of `(R, y)`. The WoLF step
//! inflates `R` to `R/r²` and leaves `y` untouched.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::lgss::{
    information_update, kf_forecast, linear_update, rts_smoother, GaussianBelief, LgssModel,
    StateSpace,
};
use crate::linalg::{leading_eigenvector, SpdFactor};
use crate::weights::{
    corrected_observation, eval_kernel, rescaled_obs_cov, Standardization, WeightEvaluation,
    WeightKernelSpec,
};

/// Output of one analysis step.
#[derive(Debug, Clone)]
pub struct AnalysisResult {
    pub posterior: GaussianBelief,
    pub kernel_eval: WeightEvaluation,
    pub corrected_obs: DVector<f64>,
    pub rescaled_cov: DMatrix<f64>,
    pub gain: DMatrix<f64>,
}

/// Covariance that standardizes the residual for a given mode. In the exact
/// filter the observation-anomaly covariance coincides with the marginal one.
pub fn standardizing_cov(
    mode: Standardization,
    h: &DMatrix<f64>,
    forecast_cov: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<SpdFactor> {
    match mode {
        Standardization::Marginal | Standardization::ObsAnomaly => SpdFactor::named(
            h * forecast_cov * h.transpose() + r,
            "innovation covariance",
        ),
        Standardization::Conditional => SpdFactor::named(r.clone(), "observation noise covariance"),
    }
}

/// Kernel evaluation, `N` and `ỹ` for an observation `y` and forecast
/// observation `center`.
pub fn dsm_observation_terms(
    spec: &WeightKernelSpec,
    y: &DVector<f64>,
    center: &DVector<f64>,
    std_cov: &SpdFactor,
    r: &DMatrix<f64>,
) -> Result<(WeightEvaluation, DMatrix<f64>, DVector<f64>)> {
    if let Some(p) = spec.partition() {
        p.check_block_diagonal(r)?;
    }
    let eval = eval_kernel(spec, y, center, std_cov)?;
    let n = rescaled_obs_cov(&eval, r)?;
    let y_tilde = corrected_observation(&eval, &n, y)?;
    Ok((eval, n, y_tilde))
}

/// DSM analysis step in gain form.
pub fn dsm_analysis(
    model: &LgssModel,
    forecast: &GaussianBelief,
    y: &DVector<f64>,
    spec: &WeightKernelSpec,
) -> Result<AnalysisResult> {
    check_dim("observation", model.obs_dim(), y.len())?;
    check_dim("forecast", model.state_dim(), forecast.dim())?;
    let std_cov = standardizing_cov(spec.standardization(), model.h(), forecast.cov(), model.r())?;
    let center = model.h() * forecast.mean();
    let (eval, n, y_tilde) = dsm_observation_terms(spec, y, &center, &std_cov, model.r())?;
    let update = linear_update(forecast, model.h(), &n, &y_tilde)?;
    Ok(AnalysisResult {
        posterior: update.posterior,
        kernel_eval: eval,
        corrected_obs: y_tilde,
        rescaled_cov: n,
        gain: update.gain,
    })
}

/// DSM analysis step in information form: `J^a = J^f + HᵀN⁻¹H`,
/// `θ^a = θ^f + HᵀN⁻¹ỹ`.
pub fn dsm_analysis_information(
    model: &LgssModel,
    forecast: &GaussianBelief,
    y: &DVector<f64>,
    spec: &WeightKernelSpec,
) -> Result<GaussianBelief> {
    check_dim("observation", model.obs_dim(), y.len())?;
    let std_cov = standardizing_cov(spec.standardization(), model.h(), forecast.cov(), model.r())?;
    let center = model.h() * forecast.mean();
    let (_, n, y_tilde) = dsm_observation_terms(spec, y, &center, &std_cov, model.r())?;
    information_update(forecast, model.h(), &n, &y_tilde)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WolfVariant {
    /// `r² = (1 + ‖y − Hm^f‖²_{R⁻¹}/c²)⁻¹`.
    Md,
    /// `r² = 2(1 + ‖y − Hm^f‖²_{Σ⁻¹}/c²)⁻¹`.
    SigmaScaled,
}

/// Weighted-likelihood analysis configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WolfSpec {
    variant: WolfVariant,
    c_sq: f64,
}

impl WolfSpec {
    pub fn new(variant: WolfVariant, c_sq: f64) -> Result<Self> {
        if !(c_sq.is_finite() && c_sq > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "WoLF threshold must be positive and finite, got {c_sq}"
            )));
        }
        Ok(Self { variant, c_sq })
    }

    pub fn variant(&self) -> WolfVariant {
        self.variant
    }

    pub fn c_sq(&self) -> f64 {
        self.c_sq
    }

    /// Standardization of the residual for this variant.
    pub fn standardization(&self) -> Standardization {
        match self.variant {
            WolfVariant::Md => Standardization::Conditional,
            WolfVariant::SigmaScaled => Standardization::Marginal,
        }
    }

    /// `r²` from the standardized squared residual.
    pub fn weight_sq(&self, sq_residual: f64) -> f64 {
        let base = 1.0 / (1.0 + sq_residual / self.c_sq);
        match self.variant {
            WolfVariant::Md => base,
            WolfVariant::SigmaScaled => 2.0 * base,
        }
    }
}

/// WoLF analysis step: gain `P Hᵀ(R/r² + H P Hᵀ)⁻¹`, observation unchanged.
///
/// The returned kernel evaluation carries the equivalent DSM weight
/// `k² = r²/2`, so that `R/(2k²) = R/r²`.
pub fn wolf_analysis(
    model: &LgssModel,
    forecast: &GaussianBelief,
    y: &DVector<f64>,
    spec: &WolfSpec,
) -> Result<AnalysisResult> {
    check_dim("observation", model.obs_dim(), y.len())?;
    check_dim("forecast", model.state_dim(), forecast.dim())?;
    let std_cov = standardizing_cov(spec.standardization(), model.h(), forecast.cov(), model.r())?;
    let residual = y - model.h() * forecast.mean();
    let s = std_cov.mahalanobis_sq(&residual);
    let r_sq = spec.weight_sq(s);
    if !(r_sq > 0.0) {
        return Err(Error::Numerical(format!("WoLF weight vanished at residual {s}")));
    }
    let r_tilde = model.r() / r_sq;
    let update = linear_update(forecast, model.h(), &r_tilde, y)?;
    Ok(AnalysisResult {
        posterior: update.posterior,
        kernel_eval: WeightEvaluation::gradient_free(0.5 * r_sq, s, y.len()),
        corrected_obs: y.clone(),
        rescaled_cov: r_tilde,
        gain: update.gain,
    })
}

/// Regular Kalman analysis packaged like the robust steps (constant weight).
pub fn kalman_analysis(
    model: &LgssModel,
    forecast: &GaussianBelief,
    y: &DVector<f64>,
) -> Result<AnalysisResult> {
    let update = linear_update(forecast, model.h(), model.r(), y)?;
    Ok(AnalysisResult {
        posterior: update.posterior,
        kernel_eval: WeightEvaluation::gradient_free(0.5, f64::NAN, y.len()),
        corrected_obs: y.clone(),
        rescaled_cov: model.r().clone(),
        gain: update.gain,
    })
}

/// Analysis step selector for the Kalman-type filters.
#[derive(Debug, Clone, PartialEq)]
pub enum AnalysisMethod {
    Kalman,
    Dsm(WeightKernelSpec),
    Wolf(WolfSpec),
}

impl AnalysisMethod {
    pub fn analyze(
        &self,
        model: &LgssModel,
        forecast: &GaussianBelief,
        y: &DVector<f64>,
    ) -> Result<AnalysisResult> {
        match self {
            AnalysisMethod::Kalman => kalman_analysis(model, forecast, y),
            AnalysisMethod::Dsm(spec) => dsm_analysis(model, forecast, y, spec),
            AnalysisMethod::Wolf(spec) => wolf_analysis(model, forecast, y, spec),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            AnalysisMethod::Kalman => "kf",
            AnalysisMethod::Dsm(_) => "dsm",
            AnalysisMethod::Wolf(_) => "wolf",
        }
    }
}

/// Forecasts and analyses of a robust filter pass. Index `k` holds step `k + 1`.
#[derive(Debug, Clone)]
pub struct RobustFilterRun {
    pub forecasts: Vec<GaussianBelief>,
    pub analyses: Vec<AnalysisResult>,
}

impl RobustFilterRun {
    pub fn posteriors(&self) -> Vec<GaussianBelief> {
        self.analyses.iter().map(|a| a.posterior.clone()).collect()
    }
}

/// Runs forecast and analysis over all observations.
pub fn run_filter<S: StateSpace + ?Sized>(
    system: &S,
    observations: &[DVector<f64>],
    method: &AnalysisMethod,
) -> Result<RobustFilterRun> {
    let mut forecasts = Vec::with_capacity(observations.len());
    let mut analyses: Vec<AnalysisResult> = Vec::with_capacity(observations.len());
    for (k, y) in observations.iter().enumerate() {
        let model = system.at(k + 1);
        let previous = analyses
            .last()
            .map(|a| &a.posterior)
            .unwrap_or_else(|| system.prior());
        let forecast = kf_forecast(&model, previous)?;
        let analysis = method.analyze(&model, &forecast, y)?;
        forecasts.push(forecast);
        analyses.push(analysis);
    }
    Ok(RobustFilterRun {
        forecasts,
        analyses,
    })
}

/// RTS smoother over DSM (or any robust) analyses. The weights, `N` and `ỹ`
/// stay as computed in the forward pass.
pub fn dsm_rts_smoother<S: StateSpace + ?Sized>(
    system: &S,
    forecasts: &[GaussianBelief],
    analyses: &[AnalysisResult],
) -> Result<Vec<GaussianBelief>> {
    let posteriors: Vec<_> = analyses.iter().map(|a| a.posterior.clone()).collect();
    rts_smoother(system, forecasts, &posteriors)
}

/// Method tag of an influence-sweep row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SweepMethod {
    Kalman,
    Dsm,
    Wolf,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfluenceRow {
    pub method: SweepMethod,
    pub magnitude: f64,
    /// `‖m^a − m^f‖₂`.
    pub displacement: f64,
    pub trace_cov: f64,
}

/// Default outlier direction: the leading eigenvector of
/// `Σ = H P^f Hᵀ + R`, signed to have a nonnegative first component.
pub fn default_outlier_direction(model: &LgssModel, forecast: &GaussianBelief) -> DVector<f64> {
    let sigma = model.h() * forecast.cov() * model.h().transpose() + model.r();
    let mut u = leading_eigenvector(&sigma);
    if u[0] < 0.0 {
        u.neg_mut();
    }
    u
}

/// Places outliers `y = H m^f + magnitude·u` and records the analysis of
/// each method. `direction` defaults to [`default_outlier_direction`].
pub fn influence_sweep(
    model: &LgssModel,
    forecast: &GaussianBelief,
    spec_dsm: &WeightKernelSpec,
    spec_wolf: &WolfSpec,
    magnitudes: &[f64],
    direction: Option<&DVector<f64>>,
) -> Result<Vec<InfluenceRow>> {
    if magnitudes.is_empty() || magnitudes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter(
            "magnitudes must be nonempty and strictly increasing".into(),
        ));
    }
    let u = match direction {
        Some(u) => {
            check_dim("outlier direction", model.obs_dim(), u.len())?;
            let norm = u.norm();
            if !(norm > 0.0) {
                return Err(Error::InvalidParameter("outlier direction is zero".into()));
            }
            u / norm
        }
        None => default_outlier_direction(model, forecast),
    };
    let center = model.h() * forecast.mean();
    let methods = [
        (SweepMethod::Kalman, AnalysisMethod::Kalman),
        (SweepMethod::Dsm, AnalysisMethod::Dsm(spec_dsm.clone())),
        (SweepMethod::Wolf, AnalysisMethod::Wolf(*spec_wolf)),
    ];
    let mut rows = Vec::with_capacity(3 * magnitudes.len());
    for (tag, method) in &methods {
        for &mag in magnitudes {
            let y = &center + &u * mag;
            let a = method.analyze(model, forecast, &y)?;
            rows.push(InfluenceRow {
                method: *tag,
                magnitude: mag,
                displacement: (a.posterior.mean() - forecast.mean()).norm(),
                trace_cov: a.posterior.cov().trace(),
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weights::KernelFamily;

    fn scalar_model(pf: f64, r: f64) -> (LgssModel, GaussianBelief) {
        let prior = GaussianBelief::new(DVector::zeros(1), DMatrix::from_element(1, 1, pf)).unwrap();
        let m = LgssModel::new(
            DMatrix::identity(1, 1),
            DMatrix::zeros(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::from_element(1, 1, r),
            prior.clone(),
        )
        .unwrap();
        (m, prior)
    }

    #[test]
    fn constant_kernel_is_kalman() {
        let (m, f) = scalar_model(1.3, 0.4);
        let y = DVector::from_element(1, 2.7);
        let a = dsm_analysis(&m, &f, &y, &WeightKernelSpec::constant()).unwrap();
        let k = crate::lgss::kf_analysis(&m, &f, &y).unwrap();
        assert_eq!(a.posterior, k);
    }

    #[test]
    fn zero_residual_doubles_precision_gain() {
        let (m, f) = scalar_model(1.0, 1.0);
        let y = DVector::zeros(1);
        let a = dsm_analysis(&m, &f, &y, &WeightKernelSpec::imq(1.0).unwrap()).unwrap();
        assert_eq!(a.corrected_obs, y);
        assert_eq!(a.rescaled_cov[(0, 0)], 0.5);
        // J^a = 1 + 2
        assert!((a.posterior.cov()[(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn gain_solves_defining_system() {
        let (m, f) = scalar_model(2.0, 0.3);
        let y = DVector::from_element(1, 1.1);
        let a = dsm_analysis(&m, &f, &y, &WeightKernelSpec::imq(1.0).unwrap()).unwrap();
        let lhs = &a.gain * (&a.rescaled_cov + m.h() * f.cov() * m.h().transpose());
        let rhs = f.cov() * m.h().transpose();
        assert!((lhs - &rhs).norm() <= 1e-12 * rhs.norm());
    }

    #[test]
    fn wolf_unit_weight_is_kalman() {
        let (m, f) = scalar_model(1.0, 1.0);
        let y = DVector::from_element(1, 0.0);
        let s = WolfSpec::new(WolfVariant::Md, 1.0).unwrap();
        let a = wolf_analysis(&m, &f, &y, &s).unwrap();
        let k = crate::lgss::kf_analysis(&m, &f, &y).unwrap();
        assert_eq!(a.posterior, k);
    }

    #[test]
    fn sigma_scaled_wolf_matches_dsm_at_zero_residual() {
        let (m, f) = scalar_model(1.7, 0.6);
        let y = DVector::zeros(1);
        let w = wolf_analysis(&m, &f, &y, &WolfSpec::new(WolfVariant::SigmaScaled, 1.0).unwrap())
            .unwrap();
        let d = dsm_analysis(&m, &f, &y, &WeightKernelSpec::imq(1.0).unwrap()).unwrap();
        assert!((w.posterior.cov() - d.posterior.cov()).norm() < 1e-15);
        assert!((w.posterior.mean() - d.posterior.mean()).norm() < 1e-15);
    }

    #[test]
    fn influence_sweep_validates_input() {
        let (m, f) = scalar_model(1.0, 1.0);
        let d = WeightKernelSpec::default_for(KernelFamily::Imq, 1);
        let w = WolfSpec::new(WolfVariant::Md, 1.0).unwrap();
        assert!(influence_sweep(&m, &f, &d, &w, &[10.0, 1.0], None).is_err());
        let rows = influence_sweep(&m, &f, &d, &w, &[1.0, 10.0], None).unwrap();
        assert_eq!(rows.len(), 6);
    }
}

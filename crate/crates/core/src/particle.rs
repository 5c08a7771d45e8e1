//! Bootstrap particle filter with a DSM potential.
//!
//! Particles are propagated with the signal kernel and reweighted by
//! `exp(−ℓ)`, where `ℓ` is the DSM loss of the observation given the
//! particle. With the conditional IMQ kernel `ℓ` stays bounded as the
//! residual grows, so a single outlier cannot wipe out the cloud.

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::analysis::AnalysisResult;
use crate::dynamics::Dynamics;
use crate::error::{check_dim, Error, Result};
use crate::lgss::ObservationMap;
use crate::linalg::SpdFactor;
use crate::rng::SimRng;

/// Weighted particles. Log-weights are kept normalized (`logsumexp = 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleCloud {
    particles: DMatrix<f64>,
    log_weights: DVector<f64>,
    ess: f64,
}

fn log_sum_exp(v: &DVector<f64>) -> f64 {
    let max = v.max();
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

impl ParticleCloud {
    pub fn uniform(particles: DMatrix<f64>) -> Result<Self> {
        let m = particles.ncols();
        Self::from_log_weights(particles, DVector::zeros(m))
    }

    /// Normalizes `log_weights` by log-sum-exp.
    pub fn from_log_weights(particles: DMatrix<f64>, log_weights: DVector<f64>) -> Result<Self> {
        check_dim("log weights", particles.ncols(), log_weights.len())?;
        if particles.ncols() == 0 {
            return Err(Error::InvalidParameter("particle cloud is empty".into()));
        }
        if log_weights.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("particle log weights".into()));
        }
        let lse = log_sum_exp(&log_weights);
        if !lse.is_finite() {
            return Err(Error::Numerical("all particle weights vanished".into()));
        }
        let log_weights = log_weights.map(|v| v - lse);
        let sum_sq: f64 = log_weights.iter().map(|v| (2.0 * v).exp()).sum();
        Ok(Self {
            particles,
            log_weights,
            ess: 1.0 / sum_sq,
        })
    }

    pub fn size(&self) -> usize {
        self.particles.ncols()
    }

    pub fn dim(&self) -> usize {
        self.particles.nrows()
    }

    pub fn particles(&self) -> &DMatrix<f64> {
        &self.particles
    }

    pub fn log_weights(&self) -> &DVector<f64> {
        &self.log_weights
    }

    pub fn weights(&self) -> DVector<f64> {
        self.log_weights.map(f64::exp)
    }

    /// Effective sample size `1 / Σ wᵢ²`.
    pub fn ess(&self) -> f64 {
        self.ess
    }

    pub fn weighted_mean(&self) -> DVector<f64> {
        &self.particles * self.weights()
    }

    pub fn weighted_cov(&self) -> DMatrix<f64> {
        let w = self.weights();
        let mean = &self.particles * &w;
        let mut cov = DMatrix::zeros(self.dim(), self.dim());
        for (i, col) in self.particles.column_iter().enumerate() {
            let c = col - &mean;
            cov += &c * c.transpose() * w[i];
        }
        cov
    }

    /// Delta-method standard error of each component of the weighted mean,
    /// `√(Σ wᵢ² (xᵢ − x̄)²)`.
    pub fn mean_std_error(&self) -> DVector<f64> {
        let w = self.weights();
        let mean = &self.particles * &w;
        let mut acc = DVector::zeros(self.dim());
        for (i, col) in self.particles.column_iter().enumerate() {
            let c = col - &mean;
            acc += c.component_mul(&c) * (w[i] * w[i]);
        }
        acc.map(f64::sqrt)
    }
}

/// Log-potential `−ℓ` of the DSM loss with the conditional IMQ kernel
/// `k² = (1 + ‖y − h(x)‖²_{R⁻¹}/q²)⁻¹`:
/// `ℓ = k²s + (4/q²)k⁴s − 2d_Y k²`, `s = ‖y − h(x)‖²_{R⁻¹}`.
///
/// `ℓ → q²` as the residual grows and `ℓ = −2d_Y` at zero residual.
pub fn dsm_log_potential(y: &DVector<f64>, h_of_x: &DVector<f64>, r: &SpdFactor, q_sq: f64) -> f64 {
    let s = r.mahalanobis_sq(&(y - h_of_x));
    let k2 = 1.0 / (1.0 + s / q_sq);
    // k²s written as s/(1 + s/q²) stays finite when s overflows
    let k2s = if s.is_finite() { k2 * s } else { q_sq };
    let loss = k2s + 4.0 / q_sq * k2 * k2s - 2.0 * y.len() as f64 * k2;
    -loss
}

/// Reweighting potential of the particle filter.
#[derive(Debug, Clone)]
pub enum Potential {
    /// DSM loss with the kernel centered at each particle's `h(x)`.
    Conditional { q_sq: f64 },
    /// DSM loss with `k²` and `∇k²` frozen at one center. Equals
    /// `−½‖ỹ − h(x)‖²_{N⁻¹}` up to a constant, so the weighted cloud
    /// targets the closed-form DSM posterior on a linear model.
    Frozen { n: SpdFactor, y_tilde: DVector<f64> },
    /// No reweighting.
    Constant,
}

impl Potential {
    pub fn conditional(q_sq: f64) -> Result<Self> {
        if !(q_sq > 0.0 && q_sq.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "potential threshold must be positive, got {q_sq}"
            )));
        }
        Ok(Self::Conditional { q_sq })
    }

    /// Freezes the rescaled covariance and corrected observation of a
    /// closed-form analysis.
    pub fn frozen_from(analysis: &AnalysisResult) -> Result<Self> {
        Ok(Self::Frozen {
            n: SpdFactor::named(analysis.rescaled_cov.clone(), "rescaled covariance")?,
            y_tilde: analysis.corrected_obs.clone(),
        })
    }

    pub fn log_potential(&self, y: &DVector<f64>, h_of_x: &DVector<f64>, r: &SpdFactor) -> f64 {
        match self {
            Potential::Conditional { q_sq } => dsm_log_potential(y, h_of_x, r, *q_sq),
            Potential::Frozen { n, y_tilde } => -0.5 * n.mahalanobis_sq(&(y_tilde - h_of_x)),
            Potential::Constant => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ResampleScheme {
    #[default]
    Multinomial,
    Systematic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResampleConfig {
    /// Resample when `ESS / M` falls below this fraction.
    pub threshold: f64,
    pub scheme: ResampleScheme,
}

impl Default for ResampleConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            scheme: ResampleScheme::Multinomial,
        }
    }
}

/// Adds the log-potential of `y` to every particle and renormalizes.
pub fn reweight(
    cloud: &ParticleCloud,
    observation: &dyn ObservationMap,
    r: &SpdFactor,
    y: &DVector<f64>,
    potential: &Potential,
) -> Result<ParticleCloud> {
    check_dim("observation", observation.obs_dim(), y.len())?;
    let lw = DVector::from_fn(cloud.size(), |i, _| {
        let hx = observation.apply(&cloud.particles.column(i).into_owned());
        cloud.log_weights[i] + potential.log_potential(y, &hx, r)
    });
    ParticleCloud::from_log_weights(cloud.particles.clone(), lw)
}

/// Draws `M` particles by their weights and resets the weights to uniform.
pub fn resample(cloud: &ParticleCloud, scheme: ResampleScheme, rng: &mut SimRng) -> Result<ParticleCloud> {
    let m = cloud.size();
    let w = cloud.weights();
    let picks: Vec<usize> = match scheme {
        ResampleScheme::Multinomial => {
            let dist = WeightedIndex::new(w.iter().copied())
                .map_err(|e| Error::Numerical(format!("resampling weights: {e}")))?;
            (0..m).map(|_| dist.sample(rng)).collect()
        }
        ResampleScheme::Systematic => {
            let u0: f64 = rng.random::<f64>() / m as f64;
            let mut out = Vec::with_capacity(m);
            let mut cum = w[0];
            let mut j = 0;
            for i in 0..m {
                let u = u0 + i as f64 / m as f64;
                while u > cum && j + 1 < m {
                    j += 1;
                    cum += w[j];
                }
                out.push(j);
            }
            out
        }
    };
    ParticleCloud::uniform(cloud.particles.select_columns(&picks))
}

/// Result of one filter step.
#[derive(Debug, Clone)]
pub struct PfStep {
    pub cloud: ParticleCloud,
    /// Weighted mean before any resampling.
    pub mean: DVector<f64>,
    pub ess_before_resampling: f64,
    pub resampled: bool,
}

/// Propagate with the signal kernel, reweight, and resample if the ESS
/// fraction drops below the threshold.
#[allow(clippy::too_many_arguments)]
pub fn pf_step(
    cloud: &ParticleCloud,
    dynamics: &dyn Dynamics,
    steps: usize,
    observation: &dyn ObservationMap,
    r: &SpdFactor,
    y: &DVector<f64>,
    potential: &Potential,
    resampling: ResampleConfig,
    rng: &mut SimRng,
) -> Result<PfStep> {
    if cloud.size() < 2 {
        return Err(Error::InvalidParameter("particle filter needs at least two particles".into()));
    }
    let mut moved = cloud.particles.clone();
    for (i, mut col) in moved.column_iter_mut().enumerate() {
        let x = dynamics.advance(&col.clone_owned(), steps, rng);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("propagated particle {i}")));
        }
        col.copy_from(&x);
    }
    let propagated = ParticleCloud::from_log_weights(moved, cloud.log_weights.clone())?;
    let weighted = reweight(&propagated, observation, r, y, potential)?;
    let mean = weighted.weighted_mean();
    let ess = weighted.ess();
    if ess / (weighted.size() as f64) < resampling.threshold {
        Ok(PfStep {
            cloud: resample(&weighted, resampling.scheme, rng)?,
            mean,
            ess_before_resampling: ess,
            resampled: true,
        })
    } else {
        Ok(PfStep {
            cloud: weighted,
            mean,
            ess_before_resampling: ess,
            resampled: false,
        })
    }
}

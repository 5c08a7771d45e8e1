//! Runs one configured filter over an experiment.

use nalgebra::{DMatrix, DVector};
use robust_da::analysis::AnalysisMethod;
use robust_da::ensemble::{
    enkf_perturbed_analysis, ensemble_forecast, esrf_analysis, letkf_analysis, EnsembleAnalysis,
    EnsembleState, EnsembleUpdate, LetkfConfig,
};
use robust_da::particle::{pf_step, ParticleCloud, Potential};
use robust_da::rng::{stream_rng, SimRng, Stream};
use robust_da::{kf_forecast, SpdFactor};
use serde::Serialize;

use crate::config::{ExperimentConfig, FilterKind, Variant};
use crate::error::BenchResult;
use crate::experiment::Experiment;

/// First step at which a filter broke down. `step` counts observations from 1.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterFailure {
    pub step: usize,
    pub message: String,
}

/// Estimates up to the end of the run or the first failure.
#[derive(Debug, Clone)]
pub struct FilterTrace {
    pub filter: FilterKind,
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
    /// Applied weight per step; NaN where a filter has no scalar weight.
    pub k_sq: Vec<f64>,
    pub failure: Option<FilterFailure>,
}

impl FilterTrace {
    fn new(filter: FilterKind, n: usize) -> Self {
        Self {
            filter,
            means: Vec::with_capacity(n),
            covariances: Vec::with_capacity(n),
            k_sq: Vec::with_capacity(n),
            failure: None,
        }
    }

    /// Stores one step; non-finite estimates end the run.
    fn push(&mut self, mean: DVector<f64>, cov: DMatrix<f64>, k_sq: f64) -> bool {
        let step = self.means.len() + 1;
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            self.fail(step, "non-finite estimate".into());
            return false;
        }
        self.means.push(mean);
        self.covariances.push(cov);
        self.k_sq.push(k_sq);
        true
    }

    fn fail(&mut self, step: usize, message: String) {
        self.failure = Some(FilterFailure { step, message });
    }

    pub fn completed(&self) -> bool {
        self.failure.is_none()
    }
}

fn ensemble_update(cfg: &ExperimentConfig, filter: FilterKind) -> BenchResult<EnsembleUpdate> {
    Ok(match filter.variant() {
        Variant::Regular => EnsembleUpdate::Regular,
        Variant::Dsm => EnsembleUpdate::Dsm(cfg.dsm_spec(filter)?),
        Variant::Wolf => EnsembleUpdate::Wolf(cfg.wolf_spec(filter)?),
    })
}

/// Runs `filter` over `exp`. Filter randomness is drawn from `seed`, so
/// filters given the same seed share their initial ensemble.
/// `ensemble_size` overrides the configured size.
pub fn run_filter(
    cfg: &ExperimentConfig,
    filter: FilterKind,
    exp: &Experiment,
    seed: u64,
    ensemble_size: Option<usize>,
) -> BenchResult<FilterTrace> {
    let n = exp.record.n_obs();
    let mut trace = FilterTrace::new(filter, n);
    if filter.is_kalman() {
        run_kalman(cfg, filter, exp, &mut trace)?;
    } else if filter == FilterKind::DsmPf {
        run_particle(cfg, exp, seed, &mut trace)?;
    } else {
        let m = ensemble_size.unwrap_or(cfg.ensemble.size);
        run_ensemble(cfg, filter, exp, seed, m, &mut trace)?;
    }
    Ok(trace)
}

fn run_kalman(
    cfg: &ExperimentConfig,
    filter: FilterKind,
    exp: &Experiment,
    trace: &mut FilterTrace,
) -> BenchResult<()> {
    let model = exp
        .model
        .as_ref()
        .expect("Kalman filters run on linear models only");
    let method = match filter.variant() {
        Variant::Regular => AnalysisMethod::Kalman,
        Variant::Dsm => AnalysisMethod::Dsm(cfg.dsm_spec(filter)?),
        Variant::Wolf => AnalysisMethod::Wolf(cfg.wolf_spec(filter)?),
    };
    let mut belief = model.prior().clone();
    for k in 0..exp.record.n_obs() {
        let y = exp.record.observation(k);
        let step = kf_forecast(model, &belief).and_then(|f| method.analyze(model, &f, &y));
        match step {
            Ok(a) => {
                let (mean, cov) = (a.posterior.mean().clone(), a.posterior.cov().clone());
                if !trace.push(mean, cov, a.kernel_eval.mean_k_sq()) {
                    return Ok(());
                }
                belief = a.posterior;
            }
            Err(e) => {
                trace.fail(k + 1, e.to_string());
                return Ok(());
            }
        }
    }
    Ok(())
}

fn run_ensemble(
    cfg: &ExperimentConfig,
    filter: FilterKind,
    exp: &Experiment,
    seed: u64,
    m: usize,
    trace: &mut FilterTrace,
) -> BenchResult<()> {
    let update = ensemble_update(cfg, filter)?;
    let letkf = if filter.is_letkf() {
        cfg.letkf_config()?
    } else {
        LetkfConfig::global()
    };
    let mode = cfg.ensemble.mode.into();
    let mut init_rng = stream_rng(seed, Stream::Ensemble);
    let mut rng = stream_rng(seed, Stream::Filter);
    let mut ens = EnsembleState::sample(exp.initial.mean(), exp.initial.cov(), m, &mut init_rng)?;
    let obs = &exp.observation;

    for k in 0..exp.record.n_obs() {
        let y = exp.record.observation(k);
        let mut step = || -> robust_da::Result<(EnsembleAnalysis, DMatrix<f64>)> {
            let forecast = ensemble_forecast(exp.dynamics.as_ref(), &ens, exp.steps_per_obs, &mut rng)?;
            let analysis = match filter {
                FilterKind::Enkf | FilterKind::DsmEnkf | FilterKind::WolfEnkf => {
                    enkf_perturbed_analysis(&forecast, obs, &y, &update, mode, &mut rng)?
                }
                FilterKind::Esrf | FilterKind::DsmEsrf => esrf_analysis(&forecast, obs, &y, &update)?,
                _ => letkf_analysis(&forecast, obs, obs.r(), &y, &update, &letkf)?,
            };
            let cov = analysis.ensemble.covariance()?;
            Ok((analysis, cov))
        };
        match step() {
            Ok((a, cov)) => {
                if !trace.push(a.ensemble.mean().clone(), cov, a.k_sq) {
                    return Ok(());
                }
                ens = a.ensemble;
            }
            Err(e) => {
                trace.fail(k + 1, e.to_string());
                return Ok(());
            }
        }
    }
    Ok(())
}

fn run_particle(
    cfg: &ExperimentConfig,
    exp: &Experiment,
    seed: u64,
    trace: &mut FilterTrace,
) -> BenchResult<()> {
    let potential = Potential::conditional(cfg.particle_q_sq())?;
    let resampling = cfg.resample_config();
    let r = SpdFactor::named(exp.observation.r().clone(), "observation noise covariance")?;
    let mut init_rng = stream_rng(seed, Stream::Ensemble);
    let mut rng: SimRng = stream_rng(seed, Stream::Filter);
    let initial = EnsembleState::sample(
        exp.initial.mean(),
        exp.initial.cov(),
        cfg.particle.count,
        &mut init_rng,
    )?;
    let mut cloud = ParticleCloud::uniform(initial.into_members())?;
    for k in 0..exp.record.n_obs() {
        let y = exp.record.observation(k);
        let step = pf_step(
            &cloud,
            exp.dynamics.as_ref(),
            exp.steps_per_obs,
            &exp.observation,
            &r,
            &y,
            &potential,
            resampling,
            &mut rng,
        );
        match step {
            Ok(s) => {
                let cov = s.cloud.weighted_cov();
                if !trace.push(s.mean, cov, f64::NAN) {
                    return Ok(());
                }
                cloud = s.cloud;
            }
            Err(e) => {
                trace.fail(k + 1, e.to_string());
                return Ok(());
            }
        }
    }
    Ok(())
}

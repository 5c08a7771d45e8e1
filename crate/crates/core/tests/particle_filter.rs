mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use robust_da::analysis::{dsm_analysis, AnalysisResult};
use robust_da::dynamics::LinearGaussian;
use robust_da::ensemble::EnsembleState;
use robust_da::lgss::LinearObservation;
use robust_da::particle::{
    dsm_log_potential, pf_step, resample, ParticleCloud, Potential, ResampleConfig, ResampleScheme,
};
use robust_da::rng::{stream_rng, Stream};
use robust_da::weights::WeightKernelSpec;
use robust_da::{GaussianBelief, LgssModel, SpdFactor};

struct Problem {
    forecast: GaussianBelief,
    obs: LinearObservation,
    y: DVector<f64>,
    exact: AnalysisResult,
}

fn problem() -> Problem {
    let forecast = GaussianBelief::new(
        DVector::from_vec(vec![0.5, -1.0]),
        DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 0.8]),
    )
    .unwrap();
    let h = DMatrix::from_row_slice(1, 2, &[1.0, 0.5]);
    let r = DMatrix::from_element(1, 1, 0.3);
    let y = DVector::from_element(1, 4.0);
    let model = LgssModel::new(DMatrix::identity(2, 2), DMatrix::zeros(2, 2), h.clone(), r.clone(), forecast.clone()).unwrap();
    let exact = dsm_analysis(&model, &forecast, &y, &WeightKernelSpec::imq(1.0).unwrap()).unwrap();
    Problem {
        forecast,
        obs: LinearObservation::new(h, r).unwrap(),
        y,
        exact,
    }
}

/// One reweighting step of a prior cloud of `m` particles, without resampling.
fn weighted_cloud(p: &Problem, m: usize, seed: u64) -> ParticleCloud {
    let prior = EnsembleState::sample(p.forecast.mean(), p.forecast.cov(), m, &mut stream_rng(seed, Stream::Ensemble))
        .unwrap()
        .into_members();
    let still = LinearGaussian::new(DMatrix::identity(2, 2), &DMatrix::zeros(2, 2), 1.0).unwrap();
    let r = SpdFactor::new(p.obs.r().clone()).unwrap();
    let never = ResampleConfig {
        threshold: 0.0,
        scheme: ResampleScheme::Multinomial,
    };
    let step = pf_step(
        &ParticleCloud::uniform(prior).unwrap(),
        &still,
        0,
        &p.obs,
        &r,
        &p.y,
        &Potential::frozen_from(&p.exact).unwrap(),
        never,
        &mut stream_rng(seed, Stream::Filter),
    )
    .unwrap();
    assert!(!step.resampled);
    step.cloud
}

#[test]
fn frozen_potential_targets_the_closed_form_posterior() {
    let p = problem();
    let cloud = weighted_cloud(&p, 100_000, 1);
    let se = cloud.mean_std_error();
    let err = cloud.weighted_mean() - p.exact.posterior.mean();
    for i in 0..2 {
        assert!(err[i].abs() <= 3.0 * se[i], "component {i}: error {} vs se {}", err[i], se[i]);
    }
    let c = cloud.weighted_cov();
    // ESS is about 1.2e4, so a few percent of Monte-Carlo error is expected.
    assert!(rel(&c, p.exact.posterior.cov()) < 0.05, "{c} vs {} ess {}", p.exact.posterior.cov(), cloud.ess());
}

#[test]
fn importance_error_decays_at_the_monte_carlo_rate() {
    let p = problem();
    let sizes = [100usize, 1_000, 10_000, 100_000];
    let reps = 30;
    let errors: Vec<f64> = sizes
        .iter()
        .map(|&m| {
            let total: f64 = (0..reps)
                .map(|rep| {
                    let c = weighted_cloud(&p, m, (m * 100 + rep) as u64);
                    (c.weighted_mean() - p.exact.posterior.mean()).norm_squared()
                })
                .sum();
            (total / reps as f64).sqrt()
        })
        .collect();
    let slope = log_log_slope(&sizes.map(|m| m as f64), &errors);
    assert!((slope + 0.5).abs() <= 0.1, "slope {slope}, errors {errors:?}");
}

#[test]
fn conditional_potential_saturates_at_the_threshold() {
    let r = SpdFactor::new(DMatrix::from_element(1, 1, 0.5)).unwrap();
    for q_sq in [0.375, 1.0, 4.0] {
        for i in 0..=60 {
            let residual = 10f64.powf(i as f64 / 10.0);
            let loss = -dsm_log_potential(&DVector::from_element(1, residual), &DVector::zeros(1), &r, q_sq);
            // k²s < q², 4k⁴s/q² ≤ 1 and 2d_Y k² ≤ 2.
            assert!(loss.is_finite() && loss < q_sq + 1.0 && loss >= -2.0, "q² = {q_sq}, residual {residual}: {loss}");
        }
        let far = -dsm_log_potential(&DVector::from_element(1, 1e6), &DVector::zeros(1), &r, q_sq);
        assert!((far - q_sq).abs() <= 1e-6 * q_sq.max(1.0), "q² = {q_sq}: {far}");
    }
}

#[test]
fn resampling_preserves_the_weighted_mean() {
    let mut g = rng(5);
    let particles = gaussian_mat(2, 500, &mut g) * 2.0;
    let lw = DVector::from_fn(500, |i, _| -0.5 * (particles[(0, i)] - 1.0).powi(2));
    let cloud = ParticleCloud::from_log_weights(particles, lw).unwrap();
    let target = cloud.weighted_mean();
    for scheme in [ResampleScheme::Multinomial, ResampleScheme::Systematic] {
        let draws = 2000;
        let means: Vec<DVector<f64>> = (0..draws)
            .map(|k| {
                resample(&cloud, scheme, &mut stream_rng(k, Stream::Filter))
                    .unwrap()
                    .weighted_mean()
            })
            .collect();
        for i in 0..2 {
            let xs: Vec<f64> = means.iter().map(|m| m[i]).collect();
            let avg = xs.iter().sum::<f64>() / draws as f64;
            let var = xs.iter().map(|x| (x - avg).powi(2)).sum::<f64>() / (draws as f64 - 1.0);
            let se = (var / draws as f64).sqrt();
            assert!((avg - target[i]).abs() <= 3.0 * se.max(1e-12), "{scheme:?} component {i}: {avg} vs {} se {se}", target[i]);
        }
    }
}

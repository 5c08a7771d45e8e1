mod common;

use common::suites::frozen_enkf_errors;
use common::*;
use nalgebra::{DMatrix, DVector};
use robust_da::analysis::{dsm_analysis, dsm_observation_terms, kalman_analysis, wolf_analysis, WolfSpec, WolfVariant};
use robust_da::ensemble::{
    enkf_perturbed_analysis, esrf_analysis, letkf_analysis, EnsembleState, EnsembleUpdate,
    KernelMode, LetkfConfig, Localization,
};
use robust_da::lgss::LinearObservation;
use robust_da::rng::{stream_rng, Stream};
use robust_da::weights::WeightKernelSpec;
use robust_da::{GaussianBelief, LgssModel, SpdFactor};

struct Setup {
    ensemble: EnsembleState,
    obs: LinearObservation,
    y: DVector<f64>,
}

fn setup(seed: u64, dx: usize, dy: usize, m: usize, outlier: f64) -> Setup {
    let mut g = rng(seed);
    let mean = gaussian_vec(dx, &mut g);
    let cov = random_spd(dx, &mut g);
    let ensemble = EnsembleState::sample(&mean, &cov, m, &mut stream_rng(seed, Stream::Ensemble)).unwrap();
    let h = gaussian_mat(dy, dx, &mut g);
    let r = random_spd(dy, &mut g);
    let mut y = &h * &mean + gaussian_vec(dy, &mut g);
    y[0] += outlier;
    Setup {
        ensemble,
        obs: LinearObservation::new(h, r).unwrap(),
        y,
    }
}

fn model_of(s: &Setup) -> (LgssModel, GaussianBelief) {
    let belief = s.ensemble.empirical_belief().unwrap();
    let d = belief.dim();
    let model = LgssModel::new(
        DMatrix::identity(d, d),
        DMatrix::zeros(d, d),
        s.obs.h().clone(),
        s.obs.r().clone(),
        belief.clone(),
    )
    .unwrap();
    (model, belief)
}

fn updates(dy: usize) -> Vec<EnsembleUpdate> {
    vec![
        EnsembleUpdate::Regular,
        EnsembleUpdate::Dsm(WeightKernelSpec::imq(dy as f64).unwrap()),
        EnsembleUpdate::Wolf(WolfSpec::new(WolfVariant::Md, dy as f64).unwrap()),
        EnsembleUpdate::Wolf(WolfSpec::new(WolfVariant::SigmaScaled, dy as f64).unwrap()),
    ]
}

fn closed_form(s: &Setup, update: &EnsembleUpdate) -> GaussianBelief {
    let (model, belief) = model_of(s);
    match update {
        EnsembleUpdate::Regular => kalman_analysis(&model, &belief, &s.y),
        EnsembleUpdate::Dsm(spec) => dsm_analysis(&model, &belief, &s.y, spec),
        EnsembleUpdate::Wolf(spec) => wolf_analysis(&model, &belief, &s.y, spec),
    }
    .unwrap()
    .posterior
}

#[test]
fn square_root_filter_matches_the_closed_form_update() {
    for seed in 0..20 {
        let s = setup(seed, 3, 2, 4 + seed as usize, if seed % 2 == 0 { 0.0 } else { 30.0 });
        for update in updates(2) {
            let a = esrf_analysis(&s.ensemble, &s.obs, &s.y, &update).unwrap().ensemble;
            let exact = closed_form(&s, &update);
            assert!(rel(&a.covariance().unwrap(), exact.cov()) <= 1e-8, "seed {seed} {update:?}");
            assert!(rel_vec(a.mean(), exact.mean()) <= 1e-8, "seed {seed} {update:?}");
        }
    }
}

#[test]
fn full_rank_global_letkf_matches_the_closed_form_update() {
    for seed in 0..20 {
        let dx = 2 + seed as usize % 4;
        let s = setup(100 + seed, dx, 3, dx + 5, if seed % 2 == 0 { 0.0 } else { 50.0 });
        for update in updates(3) {
            let a = letkf_analysis(&s.ensemble, &s.obs, s.obs.r(), &s.y, &update, &LetkfConfig::global())
                .unwrap()
                .ensemble;
            let exact = closed_form(&s, &update);
            assert!(rel(&a.covariance().unwrap(), exact.cov()) <= 1e-8, "seed {seed} {update:?}");
            assert!(rel_vec(a.mean(), exact.mean()) <= 1e-8, "seed {seed} {update:?}");
        }
    }
}

#[test]
fn constant_kernel_reduces_every_ensemble_filter_to_its_regular_form() {
    let constant = EnsembleUpdate::Dsm(WeightKernelSpec::constant());
    for seed in 0..10 {
        let s = setup(200 + seed, 6, 6, 12, 20.0);
        for mode in [KernelMode::AverageParticle, KernelMode::PerParticle] {
            let run = |u: &EnsembleUpdate| {
                enkf_perturbed_analysis(&s.ensemble, &s.obs, &s.y, u, mode, &mut stream_rng(seed, Stream::Filter))
                    .unwrap()
                    .ensemble
            };
            let (a, b) = (run(&EnsembleUpdate::Regular), run(&constant));
            assert!(rel(a.members(), b.members()) <= 1e-12);
        }
        let a = esrf_analysis(&s.ensemble, &s.obs, &s.y, &EnsembleUpdate::Regular).unwrap().ensemble;
        let b = esrf_analysis(&s.ensemble, &s.obs, &s.y, &constant).unwrap().ensemble;
        assert!(rel(a.members(), b.members()) <= 1e-12);

        let ring = LinearObservation::new(DMatrix::identity(6, 6), random_spd(1, &mut rng(seed))[(0, 0)] * DMatrix::identity(6, 6)).unwrap();
        let y = s.ensemble.mean() + DVector::from_element(6, 3.0);
        for config in [
            LetkfConfig::global(),
            LetkfConfig::localized(1.06, Localization::new(2, 1.5).unwrap()),
        ] {
            let run = |u: &EnsembleUpdate| letkf_analysis(&s.ensemble, &ring, ring.r(), &y, u, &config).unwrap().ensemble;
            assert!(rel(run(&EnsembleUpdate::Regular).members(), run(&constant).members()) <= 1e-12);
        }
    }
}

#[test]
fn frozen_gain_enkf_converges_at_the_monte_carlo_rate() {
    let sizes = [100usize, 1_000, 10_000, 100_000];
    let errors = frozen_enkf_errors(&sizes, 40);
    let slope = log_log_slope(&sizes.map(|m| m as f64), &errors);
    assert!((slope + 0.5).abs() <= 0.1, "slope {slope}, errors {errors:?}");
}

#[test]
fn average_particle_kernel_matches_the_closed_form_terms() {
    let s = setup(7, 3, 2, 30, 40.0);
    let pm = s.ensemble.covariance().unwrap();
    let spec = WeightKernelSpec::imq(2.0).unwrap();
    let sigma = SpdFactor::new(s.obs.h() * &pm * s.obs.h().transpose() + s.obs.r()).unwrap();
    let (eval, _, _) = dsm_observation_terms(&spec, &s.y, &(s.obs.h() * s.ensemble.mean()), &sigma, s.obs.r()).unwrap();
    let a = enkf_perturbed_analysis(
        &s.ensemble,
        &s.obs,
        &s.y,
        &EnsembleUpdate::Dsm(spec),
        KernelMode::AverageParticle,
        &mut stream_rng(0, Stream::Filter),
    )
    .unwrap();
    assert!((a.k_sq - eval.mean_k_sq()).abs() <= 1e-14);
}

#[test]
fn same_seed_gives_identical_ensembles() {
    let s = setup(9, 4, 2, 15, 10.0);
    let u = EnsembleUpdate::Dsm(WeightKernelSpec::imq(2.0).unwrap());
    let run = |seed| {
        enkf_perturbed_analysis(&s.ensemble, &s.obs, &s.y, &u, KernelMode::PerParticle, &mut stream_rng(seed, Stream::Filter))
            .unwrap()
            .ensemble
    };
    assert_eq!(run(3), run(3));
    assert_ne!(run(3), run(4));
}

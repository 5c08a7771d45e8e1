//! Oracle checks shared by the integration tests and the acceptance runner.
//! Each returns the worst error it saw; callers decide the tolerance.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use robust_da::analysis::{dsm_analysis, standardizing_cov};
use robust_da::ensemble::{enkf_apply_frozen, EnsembleState};
use robust_da::weights::{eval_kernel, KernelFamily, Standardization, WeightKernelSpec};
use robust_da::{kf_analysis, BlockPartition, GaussianBelief, LgssModel, SpdFactor};
use robust_da::rng::{stream_rng, Stream};

use super::dsm_loss::{dsm_loss_blocks, dsm_loss_full, Profile};
use super::grid::{gaussian_log_kernel, grid_moments};
use super::*;

/// Static model `x' = x` with the given observation, used for single analyses.
pub fn model_for(forecast: &GaussianBelief, h: DMatrix<f64>, r: DMatrix<f64>) -> LgssModel {
    let d = forecast.dim();
    LgssModel::new(DMatrix::identity(d, d), DMatrix::zeros(d, d), h, r, forecast.clone()).unwrap()
}

/// Worst relative deviation between the constant-kernel DSM analysis and the
/// Kalman analysis, over random instances with full and block partitions.
pub fn kf_recovery_max_rel(instances: usize, seed: u64) -> f64 {
    let mut g = rng(seed);
    let mut worst: f64 = 0.0;
    for instance in 0..instances {
        let dx = 1 + instance % 10;
        let dy = 1 + (instance * 7) % 10;
        let sizes = random_sizes(dy, &mut g);
        let forecast = GaussianBelief::new(gaussian_vec(dx, &mut g), random_spd(dx, &mut g)).unwrap();
        let h = gaussian_mat(dy, dx, &mut g);
        let r = random_block_spd(&sizes, &mut g);
        let model = model_for(&forecast, h, r);
        let y = gaussian_vec(dy, &mut g) * 5.0;
        let kf = kf_analysis(&model, &forecast, &y).unwrap();
        for spec in [
            WeightKernelSpec::constant(),
            WeightKernelSpec::constant().with_partition(BlockPartition::from_sizes(&sizes).unwrap()),
        ] {
            let dsm = dsm_analysis(&model, &forecast, &y, &spec).unwrap().posterior;
            worst = worst.max(rel(dsm.cov(), kf.cov())).max(rel_vec(dsm.mean(), kf.mean()));
        }
    }
    worst
}

pub struct GridCase {
    pub forecast: GaussianBelief,
    pub h: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub y: DVector<f64>,
    pub profile: Profile,
    pub blocks: Option<Vec<usize>>,
}

impl GridCase {
    pub fn spec(&self) -> WeightKernelSpec {
        let spec = match self.profile {
            Profile::Imq(q) => WeightKernelSpec::imq(q).unwrap(),
            Profile::SquaredExp(h) => WeightKernelSpec::squared_exponential(h).unwrap(),
        };
        match &self.blocks {
            Some(sizes) => spec.with_partition(BlockPartition::from_sizes(sizes).unwrap()),
            None => spec,
        }
    }

    /// Largest absolute mean error and relative covariance error of the
    /// library posterior against quadrature of `prior × exp(−DSM loss)`.
    pub fn errors(&self) -> (f64, f64) {
        let model = model_for(&self.forecast, self.h.clone(), self.r.clone());
        let post = dsm_analysis(&model, &self.forecast, &self.y, &self.spec()).unwrap().posterior;
        let center = &self.h * self.forecast.mean();
        let sigma = &self.h * self.forecast.cov() * self.h.transpose() + &self.r;
        let p_inv = self.forecast.cov().clone().try_inverse().unwrap();
        let log_density = |x: &DVector<f64>| {
            let loss = match &self.blocks {
                None => dsm_loss_full(self.profile, x, &self.y, &self.h, &self.r, &center, &sigma),
                Some(sizes) => dsm_loss_blocks(self.profile, sizes, x, &self.y, &self.h, &self.r, &center, &sigma),
            };
            gaussian_log_kernel(x, self.forecast.mean(), &p_inv) - loss
        };
        let width = post.cov().diagonal().map(|v| 12.0 * v.sqrt());
        let points = if post.dim() == 1 { 20_001 } else { 801 };
        let (m, p) = grid_moments(post.mean(), &width, points, log_density);
        ((&m - post.mean()).amax(), rel(&p, post.cov()))
    }
}

fn max_eig(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.max()
}

/// Nine prior/observation configurations in one and two dimensions,
/// including a 100σ outlier, a squared-exponential kernel and singleton blocks.
pub fn grid_cases() -> Vec<GridCase> {
    let s = |v: f64| DMatrix::from_element(1, 1, v);
    let v = |x: &[f64]| DVector::from_row_slice(x);
    let one_d = |p: f64, r: f64, y: f64, profile| GridCase {
        forecast: GaussianBelief::new(v(&[0.5]), s(p)).unwrap(),
        h: s(1.0),
        r: s(r),
        y: v(&[y]),
        profile,
        blocks: None,
    };
    let p2 = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.6]);
    let f2 = GaussianBelief::new(v(&[0.2, -0.4]), p2.clone()).unwrap();
    let r2 = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]);
    let sigma2 = &p2 + &r2;
    let big = f2.mean() + SymmetricEigen::new(sigma2.clone()).eigenvectors.column(1) * 100.0 * max_eig(&sigma2).sqrt();
    vec![
        one_d(1.0, 0.5, 0.8, Profile::Imq(1.0)),
        one_d(1.0, 0.5, 3.0, Profile::Imq(1.0)),
        one_d(2.0, 0.1, -1.0, Profile::Imq(0.375)),
        // 100 marginal standard deviations away.
        one_d(1.0, 0.5, 0.5 + 100.0 * 1.5f64.sqrt(), Profile::Imq(1.0)),
        one_d(1.0, 0.5, 2.0, Profile::SquaredExp(1.0 / std::f64::consts::LN_2)),
        GridCase {
            forecast: f2.clone(),
            h: DMatrix::from_row_slice(1, 2, &[1.0, 0.5]),
            r: s(0.4),
            y: v(&[1.5]),
            profile: Profile::Imq(1.0),
            blocks: None,
        },
        GridCase {
            forecast: f2.clone(),
            h: DMatrix::identity(2, 2),
            r: r2.clone(),
            y: v(&[1.0, 1.0]),
            profile: Profile::Imq(2.0),
            blocks: None,
        },
        GridCase {
            forecast: f2.clone(),
            h: DMatrix::identity(2, 2),
            r: r2,
            y: big,
            profile: Profile::Imq(2.0),
            blocks: None,
        },
        GridCase {
            forecast: f2,
            h: DMatrix::identity(2, 2),
            r: DMatrix::from_diagonal(&v(&[0.5, 0.3])),
            y: v(&[1.2, -2.0]),
            profile: Profile::Imq(1.0),
            blocks: Some(vec![1, 1]),
        },
    ]
}

/// Central differences of every block weight with respect to `y`.
fn fd_gradients(
    spec: &WeightKernelSpec,
    y: &DVector<f64>,
    center: &DVector<f64>,
    cov: &SpdFactor,
) -> Vec<DVector<f64>> {
    let nb = spec.resolved_partition(y.len()).unwrap().len();
    let mut out = vec![DVector::zeros(y.len()); nb];
    for i in 0..y.len() {
        let h = 1e-5 * y[i].abs().max(1.0);
        let mut up = y.clone();
        let mut dn = y.clone();
        up[i] += h;
        dn[i] -= h;
        let ku = eval_kernel(spec, &up, center, cov).unwrap().k_sq_per_block;
        let kd = eval_kernel(spec, &dn, center, cov).unwrap().k_sq_per_block;
        for b in 0..nb {
            out[b][i] = (ku[b] - kd[b]) / (2.0 * h);
        }
    }
    out
}

pub struct GradientReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Whether `grad_diag` agreed exactly with the per-block gradients.
    pub diag_consistent: bool,
}

/// Analytic against finite-difference gradients over random instances, both
/// families, all standardizations and full and block partitions.
pub fn gradient_suite(instances: usize, seed: u64) -> GradientReport {
    let mut g = rng(seed);
    let modes = [Standardization::Marginal, Standardization::Conditional, Standardization::ObsAnomaly];
    let mut report = GradientReport {
        checked: 0,
        max_rel_error: 0.0,
        diag_consistent: true,
    };
    for instance in 0..instances {
        let dy = 1 + instance % 6;
        let dx = 1 + (instance / 6) % 4;
        let sizes = random_sizes(dy, &mut g);
        let r = random_block_spd(&sizes, &mut g);
        let pf = random_spd(dx, &mut g);
        let h = gaussian_mat(dy, dx, &mut g);
        let center = gaussian_vec(dy, &mut g);
        for family in [KernelFamily::Imq, KernelFamily::SquaredExponential] {
            for mode in modes {
                let cov = standardizing_cov(mode, &h, &pf, &r).unwrap();
                // Residuals of a few standard deviations keep the weights away from 0.
                let y = &center + cov.lower() * gaussian_vec(dy, &mut g);
                for blocked in [false, true] {
                    let mut spec = WeightKernelSpec::new(family, dy as f64).unwrap().with_standardization(mode);
                    if blocked {
                        spec = spec.with_default_block_thresholds(BlockPartition::from_sizes(&sizes).unwrap());
                    }
                    let eval = eval_kernel(&spec, &y, &center, &cov).unwrap();
                    for (b, fd_b) in fd_gradients(&spec, &y, &center, &cov).iter().enumerate() {
                        let an = &eval.full_grad_per_block[b];
                        let err = (an - fd_b).norm() / an.norm().max(1e-6);
                        report.max_rel_error = report.max_rel_error.max(err);
                    }
                    for i in 0..dy {
                        let b = eval.partition.block_of(i);
                        report.diag_consistent &= eval.grad_diag[i] == eval.full_grad_per_block[b][i];
                    }
                    report.checked += 1;
                }
            }
        }
    }
    report
}

/// Root-mean-square error of the frozen-gain EnKF mean against the closed-form
/// DSM posterior mean, for each ensemble size.
pub fn frozen_enkf_errors(sizes: &[usize], reps: usize) -> Vec<f64> {
    let mean = DVector::from_vec(vec![0.5, -1.0]);
    let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 0.8]);
    let h = DMatrix::from_row_slice(1, 2, &[1.0, 0.5]);
    let forecast = GaussianBelief::new(mean.clone(), cov.clone()).unwrap();
    let model = model_for(&forecast, h.clone(), DMatrix::from_element(1, 1, 0.3));
    let y = DVector::from_element(1, 6.0);
    let exact = dsm_analysis(&model, &forecast, &y, &WeightKernelSpec::imq(1.0).unwrap()).unwrap();
    sizes
        .iter()
        .map(|&m| {
            let mut total = 0.0;
            for rep in 0..reps {
                let seed = (m * 1000 + rep) as u64;
                let e = EnsembleState::sample(&mean, &cov, m, &mut stream_rng(seed, Stream::Ensemble)).unwrap();
                let a = enkf_apply_frozen(
                    &e,
                    &h,
                    &exact.gain,
                    &exact.rescaled_cov,
                    &exact.corrected_obs,
                    &mut stream_rng(seed, Stream::Filter),
                )
                .unwrap();
                total += (a.mean() - exact.posterior.mean()).norm_squared();
            }
            (total / reps as f64).sqrt()
        })
        .collect()
}

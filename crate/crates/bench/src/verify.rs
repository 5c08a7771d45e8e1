//! Monte-Carlo checks too heavy for the unit tests, run by `robust-da verify`.

use nalgebra::{DMatrix, DVector};
use robust_da::analysis::{influence_sweep, SweepMethod, WolfSpec, WolfVariant};
use robust_da::weights::{expected_weight_mc, tune_threshold, KernelFamily, WeightKernelSpec};
use robust_da::{kf_forecast, GaussianBelief, LgssModel};
use serde::Serialize;

use crate::error::BenchResult;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Samples per expectation.
pub const VERIFY_SAMPLES: usize = 1_000_000;

/// Threshold reached by tuning at `d_Y = 1` so that `E[2k²] = 1`.
pub fn tune_unit_weight(d_y: usize, n_samples: usize, seed: u64) -> BenchResult<f64> {
    Ok(tune_threshold(d_y, KernelFamily::Imq, 1.0, n_samples, seed)?.threshold)
}

fn weight_checks(seed: u64, out: &mut Vec<Check>) -> BenchResult<()> {
    for (d, upper) in [(10usize, 1.9), (100, 1.3), (1000, 1.1)] {
        let e = expected_weight_mc(d, d as f64, KernelFamily::Imq, VERIFY_SAMPLES, seed)?;
        out.push(Check {
            name: format!("E[2k²] at d_Y = {d} in [1, {upper})"),
            passed: e.mean >= 1.0 && e.mean < upper,
            detail: format!("{:.5} ± {:.1e}", e.mean, e.std_error),
        });
    }
    let e = expected_weight_mc(1, 1.0, KernelFamily::Imq, VERIFY_SAMPLES, seed)?;
    out.push(Check {
        name: "E[2k²] at d_Y = 1, q² = 1 is 1.3 ± 0.02".into(),
        passed: (e.mean - 1.3).abs() <= 0.02,
        detail: format!("{:.5} ± {:.1e}", e.mean, e.std_error),
    });
    let q = tune_unit_weight(1, VERIFY_SAMPLES, seed)?;
    out.push(Check {
        name: "tuned q² at d_Y = 1 is 0.375 ± 0.02".into(),
        passed: (q - 0.375).abs() <= 0.02,
        detail: format!("{q:.5}"),
    });
    Ok(())
}

fn plateau_check(out: &mut Vec<Check>) -> BenchResult<()> {
    let s = |v| DMatrix::from_element(1, 1, v);
    let prior = GaussianBelief::new(DVector::from_element(1, 0.0), s(1.0))?;
    let model = LgssModel::new(s(0.7), s(1.3), s(1.0), s(0.1), prior.clone())?;
    let forecast = kf_forecast(&model, &prior)?;
    let magnitudes: Vec<f64> = (0..=6).map(|p| 10f64.powi(p)).collect();
    let rows = influence_sweep(
        &model,
        &forecast,
        &WeightKernelSpec::imq(1.0)?,
        &WolfSpec::new(WolfVariant::Md, 1.0)?,
        &magnitudes,
        None,
    )?;
    let disp = |m: SweepMethod, mag: f64| {
        rows.iter()
            .find(|r| r.method == m && r.magnitude == mag)
            .map(|r| r.displacement)
            .unwrap_or(f64::NAN)
    };
    for m in [SweepMethod::Dsm, SweepMethod::Wolf] {
        let (a, b) = (disp(m, 1e3), disp(m, 1e6));
        out.push(Check {
            name: format!("{m:?} displacement plateaus"),
            passed: b <= 2.0 * a,
            detail: format!("{b:.3e} at 1e6 vs {a:.3e} at 1e3"),
        });
    }
    let (k, d) = (disp(SweepMethod::Kalman, 1e6), disp(SweepMethod::Dsm, 1e6));
    out.push(Check {
        name: "Kalman displacement at 1e6 is 100× DSM".into(),
        passed: k >= 100.0 * d,
        detail: format!("{k:.3e} vs {d:.3e}"),
    });
    Ok(())
}

pub fn run_verification(seed: u64) -> BenchResult<Vec<Check>> {
    let mut out = Vec::new();
    weight_checks(seed, &mut out)?;
    plateau_check(&mut out)?;
    Ok(out)
}

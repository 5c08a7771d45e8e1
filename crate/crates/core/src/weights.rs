//! Weight kernels, the rescaled observation covariance and the corrected
//! observation.
//!
//! A kernel maps the standardized residual `s = ‖y − c‖²_{Σ⁻¹}` to a squared
//! weight `k² ∈ (0, 1]`. The DSM analysis replaces `R` by `N = R / (2k²)`
//! and `y` by `ỹ = y − 2N∇k²`. With a block partition each block gets its
//! own weight computed from the whitened residual `Σ^{-1/2}(y − c)`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution};

use crate::error::{check_dim, Error, Result};
use crate::lgss::BlockPartition;
use crate::linalg::SpdFactor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelFamily {
    /// Inverse multi-quadric, `k² = (1 + s/q²)⁻¹`.
    Imq,
    /// `k² = exp(−s/h²)`.
    SquaredExponential,
    /// `k² ≡ 1/2`; reproduces the Kalman filter.
    Constant,
}

/// Which covariance standardizes the residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Standardization {
    /// Innovation covariance `H P^f Hᵀ + R`.
    #[default]
    Marginal,
    /// Observation noise covariance `R`.
    Conditional,
    /// Ensemble observation-anomaly covariance `Y Yᵀ/(M−1) + R`.
    ObsAnomaly,
}

/// Kernel family, per-block thresholds, standardization and block layout.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightKernelSpec {
    family: KernelFamily,
    thresholds: Vec<f64>,
    standardization: Standardization,
    partition: Option<BlockPartition>,
}

impl WeightKernelSpec {
    pub fn new(family: KernelFamily, threshold: f64) -> Result<Self> {
        let spec = Self {
            family,
            thresholds: vec![threshold],
            standardization: Standardization::Marginal,
            partition: None,
        };
        spec.check_thresholds()?;
        Ok(spec)
    }

    pub fn imq(q_sq: f64) -> Result<Self> {
        Self::new(KernelFamily::Imq, q_sq)
    }

    pub fn squared_exponential(h_sq: f64) -> Result<Self> {
        Self::new(KernelFamily::SquaredExponential, h_sq)
    }

    pub fn constant() -> Self {
        Self {
            family: KernelFamily::Constant,
            thresholds: vec![1.0],
            standardization: Standardization::Marginal,
            partition: None,
        }
    }

    /// Default threshold for a single block of dimension `d_y`.
    pub fn default_for(family: KernelFamily, d_y: usize) -> Self {
        Self {
            family,
            thresholds: vec![default_threshold(d_y, family)],
            standardization: Standardization::Marginal,
            partition: None,
        }
    }

    pub fn with_standardization(mut self, standardization: Standardization) -> Self {
        self.standardization = standardization;
        self
    }

    /// Use `partition` with the same threshold in every block.
    pub fn with_partition(mut self, partition: BlockPartition) -> Self {
        self.partition = Some(partition);
        self
    }

    /// Use `partition` with the default threshold for each block's size.
    pub fn with_default_block_thresholds(mut self, partition: BlockPartition) -> Self {
        self.thresholds = partition
            .blocks()
            .iter()
            .map(|b| default_threshold(b.len(), self.family))
            .collect();
        self.partition = Some(partition);
        self
    }

    /// One threshold per block of the attached partition.
    pub fn with_block_thresholds(mut self, thresholds: Vec<f64>) -> Result<Self> {
        self.thresholds = thresholds;
        self.check_thresholds()?;
        Ok(self)
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn standardization(&self) -> Standardization {
        self.standardization
    }

    pub fn partition(&self) -> Option<&BlockPartition> {
        self.partition.as_ref()
    }

    /// Threshold of block `b` (the single threshold is shared by all blocks).
    pub fn threshold(&self, b: usize) -> f64 {
        if self.thresholds.len() == 1 {
            self.thresholds[0]
        } else {
            self.thresholds[b]
        }
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    /// The partition to use for an observation of dimension `d_y`.
    pub fn resolved_partition(&self, d_y: usize) -> Result<BlockPartition> {
        let p = match &self.partition {
            Some(p) => {
                check_dim("kernel block partition", d_y, p.dim())?;
                p.clone()
            }
            None => BlockPartition::full(d_y),
        };
        if self.thresholds.len() != 1 && self.thresholds.len() != p.len() {
            return Err(Error::DimensionMismatch {
                context: "per-block thresholds",
                expected: p.len(),
                found: self.thresholds.len(),
            });
        }
        Ok(p)
    }

    fn check_thresholds(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(Error::InvalidParameter("no kernel threshold given".into()));
        }
        if let Some(t) = self.thresholds.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "kernel threshold must be positive and finite, got {t}"
            )));
        }
        Ok(())
    }

    /// `(k², dk²/ds)` at standardized squared residual `s` for block `b`.
    fn profile(&self, b: usize, s: f64) -> (f64, f64) {
        let t = self.threshold(b);
        match self.family {
            KernelFamily::Imq => {
                let k2 = 1.0 / (1.0 + s / t);
                (k2, -k2 * k2 / t)
            }
            KernelFamily::SquaredExponential => {
                // Floored so that far outliers still give a finite N.
                let k2 = (-s / t).exp().max(f64::MIN_POSITIVE);
                (k2, -k2 / t)
            }
            KernelFamily::Constant => (0.5, 0.0),
        }
    }
}

/// Kernel value and gradients at one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightEvaluation {
    /// `k²_b` per block.
    pub k_sq_per_block: DVector<f64>,
    /// Entry `i` is `∂k²_{b(i)}/∂y_i`.
    pub grad_diag: DVector<f64>,
    /// Full gradient `∇_y k²_b` per block.
    pub full_grad_per_block: Vec<DVector<f64>>,
    /// Standardized squared residual per block.
    pub sq_residual_per_block: DVector<f64>,
    pub partition: BlockPartition,
}

impl WeightEvaluation {
    /// Weight of a single-block evaluation, or of the first block.
    pub fn k_sq(&self) -> f64 {
        self.k_sq_per_block[0]
    }

    /// Weight for coordinate `i` of the observation.
    pub fn k_sq_at(&self, i: usize) -> f64 {
        self.k_sq_per_block[self.partition.block_of(i)]
    }

    /// Mean weight over coordinates.
    pub fn mean_k_sq(&self) -> f64 {
        let d = self.partition.dim() as f64;
        self.partition
            .blocks()
            .iter()
            .zip(self.k_sq_per_block.iter())
            .map(|(b, k)| b.len() as f64 * k)
            .sum::<f64>()
            / d
    }

    /// Evaluation carrying a fixed weight and no gradient, e.g. for
    /// weighted-likelihood updates that report a DSM-equivalent weight.
    pub fn gradient_free(k_sq: f64, sq_residual: f64, d_y: usize) -> Self {
        Self {
            k_sq_per_block: DVector::from_element(1, k_sq),
            grad_diag: DVector::zeros(d_y),
            full_grad_per_block: vec![DVector::zeros(d_y)],
            sq_residual_per_block: DVector::from_element(1, sq_residual),
            partition: BlockPartition::full(d_y),
        }
    }
}

/// Evaluates the kernel at `y` with residual measured from `center` and
/// standardized by `std_cov`.
///
/// Single block: `s = rᵀΣ⁻¹r`, `∇k² = f'(s)·2Σ⁻¹r`. Several blocks:
/// `z = Σ^{-1/2} r` with the symmetric root, `s_b = ‖z_b‖²` and
/// `∇k²_b = f'(s_b)·2·(Σ^{-1/2})[b,:]ᵀ z_b`.
pub fn eval_kernel(
    spec: &WeightKernelSpec,
    y: &DVector<f64>,
    center: &DVector<f64>,
    std_cov: &SpdFactor,
) -> Result<WeightEvaluation> {
    let d = y.len();
    check_dim("kernel center", d, center.len())?;
    check_dim("standardizing covariance", d, std_cov.dim())?;
    let partition = spec.resolved_partition(d)?;
    let nb = partition.len();
    let mut k_sq = DVector::zeros(nb);
    let mut sq_res = DVector::zeros(nb);
    let mut grad_diag = DVector::zeros(d);
    let mut full = Vec::with_capacity(nb);

    if spec.family == KernelFamily::Constant {
        k_sq.fill(0.5);
        full.resize(nb, DVector::zeros(d));
        return Ok(WeightEvaluation {
            k_sq_per_block: k_sq,
            grad_diag,
            full_grad_per_block: full,
            sq_residual_per_block: sq_res,
            partition,
        });
    }

    let r = y - center;
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kernel residual".into()));
    }
    if partition.is_single() {
        let w = std_cov.solve_vec(&r);
        let s = r.dot(&w).max(0.0);
        let (k2, dk2) = spec.profile(0, s);
        let g = w * (2.0 * dk2);
        k_sq[0] = k2;
        sq_res[0] = s;
        grad_diag.copy_from(&g);
        full.push(g);
    } else {
        let inv_root = std_cov.inv_sym_sqrt();
        let z = inv_root * &r;
        for (b, range) in partition.blocks().iter().enumerate() {
            let zb = z.rows(range.start, range.len());
            let s = zb.norm_squared();
            let (k2, dk2) = spec.profile(b, s);
            let rows = inv_root.rows(range.start, range.len());
            let g = rows.transpose() * zb * (2.0 * dk2);
            for i in range.clone() {
                grad_diag[i] = g[i];
            }
            k_sq[b] = k2;
            sq_res[b] = s;
            full.push(g);
        }
    }
    Ok(WeightEvaluation {
        k_sq_per_block: k_sq,
        grad_diag,
        full_grad_per_block: full,
        sq_residual_per_block: sq_res,
        partition,
    })
}

/// Block-diagonal `N` with blocks `R_b / (2k²_b)`.
pub fn rescaled_obs_cov(eval: &WeightEvaluation, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = eval.partition.dim();
    check_dim("observation covariance", d, r.nrows())?;
    let mut n = DMatrix::zeros(d, d);
    for (b, range) in eval.partition.blocks().iter().enumerate() {
        let k2 = eval.k_sq_per_block[b];
        if !(k2 > 0.0 && k2.is_finite()) {
            return Err(Error::Numerical(format!(
                "weight of block {b} is {k2}; cannot rescale the observation covariance"
            )));
        }
        let scale = 1.0 / (2.0 * k2);
        let (s, l) = (range.start, range.len());
        n.view_mut((s, s), (l, l)).copy_from(&(r.view((s, s), (l, l)) * scale));
    }
    Ok(n)
}

/// `ỹ = y − 2N·g`, with `g` the full gradient for a single block and the
/// diagonal divergence otherwise.
pub fn corrected_observation(
    eval: &WeightEvaluation,
    n: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_dim("corrected observation", eval.partition.dim(), y.len())?;
    check_dim("rescaled covariance", y.len(), n.nrows())?;
    let g = if eval.partition.is_single() {
        &eval.full_grad_per_block[0]
    } else {
        &eval.grad_diag
    };
    Ok(y - (n * g) * 2.0)
}

/// Analytic bounds on `E[2k²(Ξ)]` for `Ξ ~ χ²(d_Y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JensenBounds {
    pub lower: f64,
    pub upper: f64,
    pub mad_upper: f64,
    /// Tighter upper bound `lower + √d_Y/(3q²)` suggested by simulation
    /// only. Not a proven bound.
    pub empirical_upper: f64,
}

/// Jensen-gap bounds: `g(d) ≤ E[2k²] ≤ g(d) + L√(2d)` and
/// `MAD ≤ 2L√(2d)`, with `L` the Lipschitz constant of `2k²` in `s`.
pub fn jensen_bounds(d_y: usize, threshold: f64, family: KernelFamily) -> JensenBounds {
    let d = d_y as f64;
    let (g, lip) = match family {
        KernelFamily::Imq => (2.0 / (1.0 + d / threshold), 2.0 / threshold),
        KernelFamily::SquaredExponential => (2.0 * (-d / threshold).exp(), 2.0 / threshold),
        KernelFamily::Constant => (1.0, 0.0),
    };
    let spread = lip * (2.0 * d).sqrt();
    JensenBounds {
        lower: g,
        upper: g + spread,
        mad_upper: 2.0 * spread,
        empirical_upper: g + d.sqrt() / (3.0 * threshold),
    }
}

/// Monte-Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
}

pub const MIN_MC_SAMPLES: usize = 10_000;

fn chi_square_draws(d_y: usize, n_samples: usize, seed: u64) -> Result<Vec<f64>> {
    if d_y == 0 {
        return Err(Error::InvalidParameter("d_y must be at least 1".into()));
    }
    if n_samples < MIN_MC_SAMPLES {
        return Err(Error::InvalidParameter(format!(
            "need at least {MIN_MC_SAMPLES} samples, got {n_samples}"
        )));
    }
    let chi = ChiSquared::new(d_y as f64)
        .map_err(|e| Error::InvalidParameter(format!("chi-square: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_samples).map(|_| chi.sample(&mut rng)).collect())
}

fn mean_weight(draws: &[f64], spec: &WeightKernelSpec) -> McEstimate {
    let n = draws.len() as f64;
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for &s in draws {
        let w = 2.0 * spec.profile(0, s).0;
        sum += w;
        sum_sq += w * w;
    }
    let mean = sum / n;
    let var = ((sum_sq / n - mean * mean) * n / (n - 1.0)).max(0.0);
    McEstimate {
        mean,
        std_error: (var / n).sqrt(),
    }
}

/// Monte-Carlo estimate of `E[2k²(Ξ)]`, `Ξ ~ χ²(d_Y)`. Deterministic in `seed`.
pub fn expected_weight_mc(
    d_y: usize,
    threshold: f64,
    family: KernelFamily,
    n_samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    let spec = WeightKernelSpec::new(family, threshold)?;
    let draws = chi_square_draws(d_y, n_samples, seed)?;
    Ok(mean_weight(&draws, &spec))
}

/// `d_Y` for IMQ, `d_Y / ln 2` for the squared exponential.
pub fn default_threshold(d_y: usize, family: KernelFamily) -> f64 {
    let d = d_y.max(1) as f64;
    match family {
        KernelFamily::Imq => d,
        KernelFamily::SquaredExponential => d / std::f64::consts::LN_2,
        KernelFamily::Constant => 1.0,
    }
}

/// Threshold found by tuning, with the achieved expectation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TunedThreshold {
    pub threshold: f64,
    pub expected_weight: McEstimate,
}

/// Finds the threshold at which `E[2k²(Ξ)] = target` by bisection on
/// `log(threshold)`. The same χ² draws are reused for every candidate, so the
/// map being bisected is exactly monotone.
pub fn tune_threshold(
    d_y: usize,
    family: KernelFamily,
    target: f64,
    n_samples: usize,
    seed: u64,
) -> Result<TunedThreshold> {
    if family == KernelFamily::Constant {
        return Err(Error::InvalidParameter(
            "the constant kernel has no threshold to tune".into(),
        ));
    }
    if !(target > 0.0 && target < 2.0) {
        return Err(Error::InvalidParameter(format!(
            "target must lie in (0, 2), got {target}"
        )));
    }
    let draws = chi_square_draws(d_y, n_samples, seed)?;
    let eval = |log_t: f64| -> Result<McEstimate> {
        Ok(mean_weight(&draws, &WeightKernelSpec::new(family, log_t.exp())?))
    };
    let base = (d_y as f64).ln();
    let (mut lo, mut hi) = (base - 30.0, base + 30.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if eval(mid)?.mean < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    let log_t = 0.5 * (lo + hi);
    Ok(TunedThreshold {
        threshold: log_t.exp(),
        expected_weight: eval(log_t)?,
    })
}

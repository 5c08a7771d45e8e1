//! Gaussian beliefs, the linear Gaussian state-space model, the Kalman
//! filter and the RTS smoother.

use std::borrow::Cow;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{symmetrize, symmetrize_mut, SpdFactor};

/// Tolerance for off-block entries of R when a block partition is attached.
const BLOCK_TOL: f64 = 1e-12;

/// A Gaussian distribution in covariance form, with information-form accessors.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianBelief {
    /// Symmetrizes `cov` and checks positive definiteness. If the Cholesky
    /// factorization only succeeds after jitter, the repaired matrix is kept.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        check_dim("belief covariance rows", mean.len(), cov.nrows())?;
        check_dim("belief covariance cols", mean.len(), cov.ncols())?;
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("belief mean".into()));
        }
        let factor = SpdFactor::named(cov, "belief covariance")?;
        let cov = factor.matrix().clone();
        Ok(Self { mean, cov })
    }

    /// Isotropic belief `N(mean, var·I)`.
    pub fn isotropic(mean: DVector<f64>, var: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, DMatrix::from_diagonal_element(d, d, var))
    }

    pub fn from_information(theta: &DVector<f64>, precision: DMatrix<f64>) -> Result<Self> {
        check_dim("information vector", precision.nrows(), theta.len())?;
        let j = SpdFactor::named(precision, "precision")?;
        Self::new(j.solve_vec(theta), j.inverse())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn factor(&self) -> Result<SpdFactor> {
        SpdFactor::named(self.cov.clone(), "belief covariance")
    }

    /// `J = P⁻¹`.
    pub fn precision(&self) -> Result<DMatrix<f64>> {
        Ok(self.factor()?.inverse())
    }

    /// `(θ, J)` with `J = P⁻¹` and `θ = J·m`.
    pub fn information(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let j = self.precision()?;
        let theta = &j * &self.mean;
        Ok((theta, j))
    }

    pub fn into_parts(self) -> (DVector<f64>, DMatrix<f64>) {
        (self.mean, self.cov)
    }
}

/// Ordered, disjoint, contiguous cover of the observation indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPartition {
    blocks: Vec<Range<usize>>,
    owner: Vec<usize>,
}

impl BlockPartition {
    pub fn new(blocks: Vec<Range<usize>>, dim: usize) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::InvalidParameter("block partition is empty".into()));
        }
        let mut owner = Vec::with_capacity(dim);
        let mut next = 0;
        for (b, range) in blocks.iter().enumerate() {
            if range.start != next || range.end <= range.start {
                return Err(Error::InvalidParameter(format!(
                    "block {b} ({range:?}) does not continue a contiguous cover at {next}"
                )));
            }
            owner.extend(std::iter::repeat_n(b, range.len()));
            next = range.end;
        }
        if next != dim {
            return Err(Error::InvalidParameter(format!(
                "block partition covers 0..{next}, expected 0..{dim}"
            )));
        }
        Ok(Self { blocks, owner })
    }

    /// A single block spanning all `dim` coordinates.
    pub fn full(dim: usize) -> Self {
        Self {
            blocks: vec![0..dim],
            owner: vec![0; dim],
        }
    }

    /// One block per coordinate.
    pub fn singletons(dim: usize) -> Self {
        Self {
            blocks: (0..dim).map(|i| i..i + 1).collect(),
            owner: (0..dim).collect(),
        }
    }

    /// Consecutive blocks of the given sizes.
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        let mut start = 0;
        let blocks = sizes
            .iter()
            .map(|&s| {
                let r = start..start + s;
                start += s;
                r
            })
            .collect();
        Self::new(blocks, start)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.owner.len()
    }

    pub fn blocks(&self) -> &[Range<usize>] {
        &self.blocks
    }

    /// Index of the block that contains coordinate `i`.
    pub fn block_of(&self, i: usize) -> usize {
        self.owner[i]
    }

    pub fn is_single(&self) -> bool {
        self.blocks.len() == 1
    }

    /// Checks that `r` has no entries coupling different blocks.
    pub fn check_block_diagonal(&self, r: &DMatrix<f64>) -> Result<()> {
        check_dim("block partition vs R", self.dim(), r.nrows())?;
        let scale = r.amax().max(1.0);
        for i in 0..r.nrows() {
            for j in 0..r.ncols() {
                if self.owner[i] != self.owner[j] && r[(i, j)].abs() > BLOCK_TOL * scale {
                    return Err(Error::InvalidParameter(format!(
                        "R entry ({i}, {j}) = {} couples different blocks",
                        r[(i, j)]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Observation operator of a twin experiment or a filter.
pub trait ObservationMap: Sync {
    fn obs_dim(&self) -> usize;
    fn apply(&self, x: &DVector<f64>) -> DVector<f64>;
}

/// `y = H x + R^{1/2} v`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearObservation {
    h: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl LinearObservation {
    pub fn new(h: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        check_dim("R rows", h.nrows(), r.nrows())?;
        let r = SpdFactor::named(r, "observation noise covariance")?
            .matrix()
            .clone();
        Ok(Self { h, r })
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn state_dim(&self) -> usize {
        self.h.ncols()
    }
}

impl ObservationMap for LinearObservation {
    fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.h * x
    }
}

/// Linear Gaussian state-space model with time-invariant matrices.
///
/// `x_n = A x_{n-1} + Q^{1/2} w_n`, `y_n = H x_n + R^{1/2} v_n`, `x_0 ~ prior`.
#[derive(Debug, Clone)]
pub struct LgssModel {
    a: DMatrix<f64>,
    q: DMatrix<f64>,
    h: DMatrix<f64>,
    r: DMatrix<f64>,
    prior: GaussianBelief,
    partition: Option<BlockPartition>,
}

impl LgssModel {
    /// `Q` may be singular (zero process noise is allowed); `R` must be SPD.
    pub fn new(
        a: DMatrix<f64>,
        q: DMatrix<f64>,
        h: DMatrix<f64>,
        r: DMatrix<f64>,
        prior: GaussianBelief,
    ) -> Result<Self> {
        let dx = prior.dim();
        check_dim("A rows", dx, a.nrows())?;
        check_dim("A cols", dx, a.ncols())?;
        check_dim("Q rows", dx, q.nrows())?;
        check_dim("Q cols", dx, q.ncols())?;
        check_dim("H cols", dx, h.ncols())?;
        let dy = h.nrows();
        check_dim("R rows", dy, r.nrows())?;
        check_dim("R cols", dy, r.ncols())?;
        for (m, name) in [(&a, "A"), (&q, "Q"), (&h, "H"), (&r, "R")] {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(name.into()));
            }
        }
        let q = symmetrize(&q);
        if crate::linalg::min_eigenvalue(&q) < -1e-12 * q.amax().max(1.0) {
            return Err(Error::NotPositiveDefinite {
                what: "signal noise covariance",
            });
        }
        let r = SpdFactor::named(r, "observation noise covariance")?
            .matrix()
            .clone();
        Ok(Self {
            a,
            q,
            h,
            r,
            prior,
            partition: None,
        })
    }

    /// Attach a block partition of the observation vector. R must be
    /// block-diagonal with respect to it.
    pub fn with_block_partition(mut self, partition: BlockPartition) -> Result<Self> {
        partition.check_block_diagonal(&self.r)?;
        self.partition = Some(partition);
        Ok(self)
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn prior(&self) -> &GaussianBelief {
        &self.prior
    }

    pub fn block_partition(&self) -> Option<&BlockPartition> {
        self.partition.as_ref()
    }

    /// The observation half of the model.
    pub fn observation(&self) -> LinearObservation {
        LinearObservation {
            h: self.h.clone(),
            r: self.r.clone(),
        }
    }

    /// Same system with a different prior.
    pub fn with_prior(mut self, prior: GaussianBelief) -> Result<Self> {
        check_dim("prior", self.state_dim(), prior.dim())?;
        self.prior = prior;
        Ok(self)
    }
}

/// Supplies system matrices per step. Step `n ≥ 1` is the transition into
/// `x_n` and the observation `y_n`.
pub trait StateSpace: Sync {
    fn prior(&self) -> &GaussianBelief;
    fn at(&self, step: usize) -> Cow<'_, LgssModel>;
}

impl StateSpace for LgssModel {
    fn prior(&self) -> &GaussianBelief {
        &self.prior
    }

    fn at(&self, _step: usize) -> Cow<'_, LgssModel> {
        Cow::Borrowed(self)
    }
}

type ModelSupplier = dyn Fn(usize) -> LgssModel + Send + Sync;

/// Time-varying system given by a per-step callback.
pub struct TimeVaryingModel {
    prior: GaussianBelief,
    supplier: Box<ModelSupplier>,
}

impl TimeVaryingModel {
    pub fn new(prior: GaussianBelief, supplier: impl Fn(usize) -> LgssModel + Send + Sync + 'static) -> Self {
        Self {
            prior,
            supplier: Box::new(supplier),
        }
    }
}

impl StateSpace for TimeVaryingModel {
    fn prior(&self) -> &GaussianBelief {
        &self.prior
    }

    fn at(&self, step: usize) -> Cow<'_, LgssModel> {
        Cow::Owned((self.supplier)(step))
    }
}

impl std::fmt::Debug for TimeVaryingModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TimeVaryingModel")
            .field("prior", &self.prior)
            .finish_non_exhaustive()
    }
}

/// `(A·m, A·P·Aᵀ + Q)`.
pub fn kf_forecast(model: &LgssModel, analysis: &GaussianBelief) -> Result<GaussianBelief> {
    check_dim("forecast input", model.state_dim(), analysis.dim())?;
    let mean = model.a() * analysis.mean();
    let mut cov = model.a() * analysis.cov() * model.a().transpose() + model.q();
    symmetrize_mut(&mut cov);
    GaussianBelief::new(mean, cov)
}

/// Posterior and gain of a linear-Gaussian conditioning step.
#[derive(Debug, Clone)]
pub struct LinearUpdate {
    pub posterior: GaussianBelief,
    pub gain: DMatrix<f64>,
}

/// Conditions `forecast` on `y_eff = H x + noise`, `noise ~ N(0, obs_cov)`,
/// in gain form: `K = P Hᵀ (obs_cov + H P Hᵀ)⁻¹`.
///
/// Shared by the Kalman, DSM and WoLF analysis steps, which differ only in
/// the observation covariance and the effective observation they pass in.
pub fn linear_update(
    forecast: &GaussianBelief,
    h: &DMatrix<f64>,
    obs_cov: &DMatrix<f64>,
    y_eff: &DVector<f64>,
) -> Result<LinearUpdate> {
    check_dim("observation operator cols", forecast.dim(), h.ncols())?;
    check_dim("observation covariance", h.nrows(), obs_cov.nrows())?;
    check_dim("observation", h.nrows(), y_eff.len())?;
    if y_eff.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("observation".into()));
    }
    let pf = forecast.cov();
    let pht = pf * h.transpose();
    let innovation_cov = h * &pht + obs_cov;
    let s = SpdFactor::named(innovation_cov, "innovation covariance")?;
    let gain = s.solve_mat(&pht.transpose()).transpose();
    let mut cov = pf - &gain * pht.transpose();
    symmetrize_mut(&mut cov);
    let mean = forecast.mean() - &gain * (h * forecast.mean() - y_eff);
    Ok(LinearUpdate {
        posterior: GaussianBelief::new(mean, cov)?,
        gain,
    })
}

/// Information-form counterpart of [`linear_update`]:
/// `J = J^f + Hᵀ N⁻¹ H`, `θ = θ^f + Hᵀ N⁻¹ y_eff`.
pub fn information_update(
    forecast: &GaussianBelief,
    h: &DMatrix<f64>,
    obs_cov: &DMatrix<f64>,
    y_eff: &DVector<f64>,
) -> Result<GaussianBelief> {
    check_dim("observation operator cols", forecast.dim(), h.ncols())?;
    check_dim("observation", h.nrows(), y_eff.len())?;
    let (theta_f, j_f) = forecast.information()?;
    let n = SpdFactor::named(obs_cov.clone(), "observation covariance")?;
    let ninv_h = n.solve_mat(h);
    let j = j_f + h.transpose() * ninv_h;
    let theta = theta_f + h.transpose() * n.solve_vec(y_eff);
    GaussianBelief::from_information(&theta, symmetrize(&j))
}

/// Regular Kalman analysis step.
pub fn kf_analysis(
    model: &LgssModel,
    forecast: &GaussianBelief,
    y: &DVector<f64>,
) -> Result<GaussianBelief> {
    Ok(linear_update(forecast, model.h(), model.r(), y)?.posterior)
}

/// Forecasts and analyses of a filter pass. Index `k` holds step `k + 1`.
#[derive(Debug, Clone)]
pub struct FilterRun {
    pub forecasts: Vec<GaussianBelief>,
    pub analyses: Vec<GaussianBelief>,
}

/// Runs the Kalman filter over `observations`, starting from the prior.
pub fn run_kalman_filter<S: StateSpace + ?Sized>(
    system: &S,
    observations: &[DVector<f64>],
) -> Result<FilterRun> {
    let mut forecasts = Vec::with_capacity(observations.len());
    let mut analyses = Vec::with_capacity(observations.len());
    let mut current = system.prior().clone();
    for (k, y) in observations.iter().enumerate() {
        let model = system.at(k + 1);
        let forecast = kf_forecast(&model, &current)?;
        current = kf_analysis(&model, &forecast, y)?;
        forecasts.push(forecast);
        analyses.push(current.clone());
    }
    Ok(FilterRun {
        forecasts,
        analyses,
    })
}

/// Rauch–Tung–Striebel backward pass.
///
/// `forecasts[k]` and `analyses[k]` belong to step `k + 1`; the forecast at
/// index `k + 1` must have been produced from the analysis at index `k`.
pub fn rts_smoother<S: StateSpace + ?Sized>(
    system: &S,
    forecasts: &[GaussianBelief],
    analyses: &[GaussianBelief],
) -> Result<Vec<GaussianBelief>> {
    check_dim("smoother inputs", analyses.len(), forecasts.len())?;
    let n = analyses.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut smoothed = vec![analyses[n - 1].clone(); n];
    for k in (0..n - 1).rev() {
        let model = system.at(k + 2);
        let next_forecast = &forecasts[k + 1];
        let pf = next_forecast.factor()?;
        let pa = analyses[k].cov();
        // G = P^a Aᵀ (P^f)⁻¹, formed as ((P^f)⁻¹ A P^a)ᵀ
        let g = pf.solve_mat(&(model.a() * pa)).transpose();
        let next = &smoothed[k + 1];
        let mean = analyses[k].mean() - &g * (next_forecast.mean() - next.mean());
        let mut cov = pa - &g * (next_forecast.cov() - next.cov()) * g.transpose();
        symmetrize_mut(&mut cov);
        smoothed[k] = GaussianBelief::new(mean, cov)?;
    }
    Ok(smoothed)
}

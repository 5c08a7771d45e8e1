use nalgebra::{DMatrix, DVector};

use crate::dynamics::{standard_normal_vec, Dynamics};
use crate::error::{check_dim, Error, Result};
use crate::lgss::GaussianBelief;
use crate::linalg::{symmetrize_mut, SpdFactor};
use crate::rng::SimRng;

/// `d_X × M` member matrix with its mean and anomalies.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    members: DMatrix<f64>,
    mean: DVector<f64>,
    anomalies: DMatrix<f64>,
}

impl EnsembleState {
    pub fn new(members: DMatrix<f64>) -> Result<Self> {
        if members.ncols() == 0 || members.nrows() == 0 {
            return Err(Error::InvalidParameter("ensemble is empty".into()));
        }
        if let Some(i) = members.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "ensemble member {}",
                i / members.nrows()
            )));
        }
        let mean = members.column_mean();
        let mut anomalies = members.clone();
        for mut col in anomalies.column_iter_mut() {
            col -= &mean;
        }
        Ok(Self {
            members,
            mean,
            anomalies,
        })
    }

    /// `m` members drawn from `N(mean, cov)`.
    pub fn sample(
        mean: &DVector<f64>,
        cov: &DMatrix<f64>,
        m: usize,
        rng: &mut SimRng,
    ) -> Result<Self> {
        check_dim("ensemble covariance", mean.len(), cov.nrows())?;
        let factor = SpdFactor::named(cov.clone(), "ensemble covariance")?;
        let l = factor.lower();
        let mut members = DMatrix::zeros(mean.len(), m);
        for mut col in members.column_iter_mut() {
            col.copy_from(&(mean + l * standard_normal_vec(mean.len(), rng)));
        }
        Self::new(members)
    }

    pub fn size(&self) -> usize {
        self.members.ncols()
    }

    pub fn dim(&self) -> usize {
        self.members.nrows()
    }

    pub fn members(&self) -> &DMatrix<f64> {
        &self.members
    }

    pub fn member(&self, i: usize) -> DVector<f64> {
        self.members.column(i).into_owned()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn anomalies(&self) -> &DMatrix<f64> {
        &self.anomalies
    }

    pub fn into_members(self) -> DMatrix<f64> {
        self.members
    }

    /// `X Xᵀ / (M − 1)`.
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        let m = self.size();
        if m < 2 {
            return Err(Error::InvalidParameter(
                "empirical covariance needs at least two members".into(),
            ));
        }
        let mut p = &self.anomalies * self.anomalies.transpose() / (m as f64 - 1.0);
        symmetrize_mut(&mut p);
        Ok(p)
    }

    /// Empirical mean and covariance as a belief (requires a full-rank spread).
    pub fn empirical_belief(&self) -> Result<GaussianBelief> {
        GaussianBelief::new(self.mean.clone(), self.covariance()?)
    }

    /// Ensemble with mean `mean` and anomalies `anomalies`.
    pub(crate) fn from_mean_and_anomalies(
        mean: &DVector<f64>,
        anomalies: &DMatrix<f64>,
    ) -> Result<Self> {
        let mut members = anomalies.clone();
        for mut col in members.column_iter_mut() {
            col += mean;
        }
        Self::new(members)
    }
}

/// Propagates every member `steps` integration steps with independent noise,
/// drawing members in order from `rng`.
pub fn ensemble_forecast(
    dynamics: &dyn Dynamics,
    ensemble: &EnsembleState,
    steps: usize,
    rng: &mut SimRng,
) -> Result<EnsembleState> {
    check_dim("ensemble state", dynamics.dim(), ensemble.dim())?;
    let mut members = ensemble.members().clone();
    for (i, mut col) in members.column_iter_mut().enumerate() {
        let x = dynamics.advance(&col.clone_owned(), steps, rng);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("forecast of ensemble member {i}")));
        }
        col.copy_from(&x);
    }
    EnsembleState::new(members)
}

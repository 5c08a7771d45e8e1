//! Robust Kalman filtering and ensemble data assimilation.
//!
//! The analysis steps replace the Gaussian log-likelihood by a
//! diffusion-score-matching loss (DSM) or a weighted likelihood (WoLF).
//! Both keep the Gaussian conjugate form, so every robust filter here is a
//! Kalman-type recursion with a data-dependent observation covariance.

pub mod analysis;
pub mod dynamics;
pub mod ensemble;
pub mod error;
pub mod lgss;
pub mod linalg;
pub mod metrics;
pub mod particle;
pub mod rng;
pub mod weights;

pub use error::{Error, Result};
pub use lgss::{
    kf_analysis, kf_forecast, rts_smoother, run_kalman_filter, BlockPartition, FilterRun,
    GaussianBelief, LgssModel, LinearObservation, ObservationMap, StateSpace, TimeVaryingModel,
};
pub use linalg::{mahalanobis_sq, SpdFactor};

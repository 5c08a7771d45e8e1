//! Truth and observations of one replicate.

use nalgebra::DMatrix;
use robust_da::dynamics::{
    simulate_lorenz63, simulate_lorenz96, simulate_ou, simulate_target_tracking,
    ContaminationSpec, Dynamics, LinearGaussian, Lorenz63, Lorenz96, TrajectoryRecord,
};
use robust_da::{GaussianBelief, LgssModel, LinearObservation};

use crate::config::{ExperimentConfig, ModelKind};
use crate::error::BenchResult;

pub struct Experiment {
    pub record: TrajectoryRecord,
    /// Present for the linear models.
    pub model: Option<LgssModel>,
    pub dynamics: Box<dyn Dynamics>,
    pub observation: LinearObservation,
    /// Integration steps between observations.
    pub steps_per_obs: usize,
    /// Law of the initial state estimate.
    pub initial: GaussianBelief,
}

impl Experiment {
    pub fn simulate(
        cfg: &ExperimentConfig,
        contamination: &ContaminationSpec,
        seed: u64,
    ) -> BenchResult<Self> {
        let h = cfg.horizon();
        let linear = |(record, model): (TrajectoryRecord, LgssModel)| -> BenchResult<Self> {
            Ok(Self {
                dynamics: Box::new(LinearGaussian::from_model(&model, h.dt)?),
                observation: model.observation(),
                steps_per_obs: 1,
                initial: model.prior().clone(),
                model: Some(model),
                record,
            })
        };
        match cfg.model {
            ModelKind::Ou => linear(simulate_ou(h.t_end, h.dt, contamination, seed)?),
            ModelKind::Tracking2d => {
                linear(simulate_target_tracking(h.t_end, h.dt, contamination, seed)?)
            }
            ModelKind::Lorenz63 => {
                let (record, setup) = simulate_lorenz63(h.t_end, h.dt, h.t_out, contamination, seed)?;
                let d = setup.initial_state.len();
                Ok(Self {
                    record,
                    model: None,
                    dynamics: Box::new(Lorenz63::new(h.dt)),
                    observation: setup.observation,
                    steps_per_obs: setup.steps_per_obs,
                    initial: GaussianBelief::new(
                        setup.initial_state,
                        DMatrix::identity(d, d) * setup.initial_var,
                    )?,
                })
            }
            ModelKind::Lorenz96 => {
                let (record, setup) = simulate_lorenz96(
                    h.dim,
                    h.t_end,
                    h.dt,
                    h.t_out,
                    h.burn_in,
                    contamination,
                    seed,
                )?;
                let d = setup.initial_state.len();
                Ok(Self {
                    record,
                    model: None,
                    dynamics: Box::new(Lorenz96::new(h.dim, h.dt)?),
                    observation: setup.observation,
                    steps_per_obs: setup.steps_per_obs,
                    initial: GaussianBelief::new(
                        setup.initial_state,
                        DMatrix::identity(d, d) * setup.initial_var,
                    )?,
                })
            }
        }
    }

    /// True states at the observation times.
    pub fn truth(&self) -> DMatrix<f64> {
        self.record.observed_states()
    }
}

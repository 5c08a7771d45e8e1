//! Twin-experiment models: Ornstein–Uhlenbeck, constant-velocity tracking,
//! stochastic Lorenz-63 and Lorenz-96, and ε-contaminated observations.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};
use crate::lgss::{GaussianBelief, LgssModel, LinearObservation};
use crate::linalg::psd_sqrt;
use crate::rng::{stream_rng, SimRng, Stream};

/// Prior variance used for the linear experiments around the known `x₀`.
pub const LINEAR_PRIOR_VAR: f64 = 0.1;

pub fn standard_normal_vec(d: usize, rng: &mut SimRng) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample(StandardNormal))
}

/// Stochastic state-transition sampler.
pub trait Dynamics: Sync {
    fn dim(&self) -> usize;

    /// Integration time step.
    fn dt(&self) -> f64;

    /// One integration step with fresh noise.
    fn step(&self, x: &DVector<f64>, rng: &mut SimRng) -> DVector<f64>;

    /// `n` consecutive steps.
    fn advance(&self, x: &DVector<f64>, n: usize, rng: &mut SimRng) -> DVector<f64> {
        let mut x = x.clone();
        for _ in 0..n {
            x = self.step(&x, rng);
        }
        x
    }
}

/// `x ← A x + s·Q^{1/2} w`. Setting `noise_scale` to 0 gives the skeleton.
#[derive(Debug, Clone)]
pub struct LinearGaussian {
    a: DMatrix<f64>,
    q_root: DMatrix<f64>,
    noise_scale: f64,
    dt: f64,
}

impl LinearGaussian {
    pub fn new(a: DMatrix<f64>, q: &DMatrix<f64>, dt: f64) -> Result<Self> {
        check_dim("Q", a.nrows(), q.nrows())?;
        Ok(Self {
            q_root: psd_sqrt(q, 1e-10)?,
            a,
            noise_scale: 1.0,
            dt,
        })
    }

    pub fn from_model(model: &LgssModel, dt: f64) -> Result<Self> {
        Self::new(model.a().clone(), model.q(), dt)
    }

    pub fn with_noise_scale(mut self, scale: f64) -> Self {
        self.noise_scale = scale;
        self
    }
}

impl Dynamics for LinearGaussian {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn step(&self, x: &DVector<f64>, rng: &mut SimRng) -> DVector<f64> {
        let w = standard_normal_vec(self.dim(), rng);
        &self.a * x + &self.q_root * w * self.noise_scale
    }
}

/// Lorenz-63 vector field with the classical parameters (10, 28, 8/3).
pub fn lorenz63_rhs(x: &DVector<f64>) -> DVector<f64> {
    DVector::from_vec(vec![
        10.0 * (x[1] - x[0]),
        x[0] * (28.0 - x[2]) - x[1],
        x[0] * x[1] - (8.0 / 3.0) * x[2],
    ])
}

/// Euler–Maruyama Lorenz-63: `x ← x + dt·f(x) + √dt·s·w`.
#[derive(Debug, Clone, Copy)]
pub struct Lorenz63 {
    pub dt: f64,
    pub noise_scale: f64,
}

impl Lorenz63 {
    pub fn new(dt: f64) -> Self {
        Self {
            dt,
            noise_scale: 1.0,
        }
    }
}

impl Dynamics for Lorenz63 {
    fn dim(&self) -> usize {
        3
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn step(&self, x: &DVector<f64>, rng: &mut SimRng) -> DVector<f64> {
        let w = standard_normal_vec(3, rng);
        x + lorenz63_rhs(x) * self.dt + w * (self.dt.sqrt() * self.noise_scale)
    }
}

/// Lorenz-96 vector field on a ring: `(x_{i+1} − x_{i−2}) x_{i−1} − x_i + F_i`.
pub fn lorenz96_rhs(x: &DVector<f64>, forcing: &DVector<f64>) -> DVector<f64> {
    let d = x.len();
    DVector::from_fn(d, |i, _| {
        let ip1 = (i + 1) % d;
        let im1 = (i + d - 1) % d;
        let im2 = (i + d - 2) % d;
        (x[ip1] - x[im2]) * x[im1] - x[i] + forcing[i]
    })
}

fn rk4(x: &DVector<f64>, dt: f64, f: impl Fn(&DVector<f64>) -> DVector<f64>) -> DVector<f64> {
    let k1 = f(x);
    let k2 = f(&(x + &k1 * (0.5 * dt)));
    let k3 = f(&(x + &k2 * (0.5 * dt)));
    let k4 = f(&(x + &k3 * dt));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// RK4 Lorenz-96 with forcing `F_i ~ N(mean, sd²)` redrawn every step and
/// held fixed over the four stages.
#[derive(Debug, Clone, Copy)]
pub struct Lorenz96 {
    pub dim: usize,
    pub dt: f64,
    pub forcing_mean: f64,
    pub forcing_sd: f64,
}

impl Lorenz96 {
    pub fn new(dim: usize, dt: f64) -> Result<Self> {
        if dim < 4 {
            return Err(Error::InvalidParameter(format!(
                "Lorenz-96 needs at least 4 variables, got {dim}"
            )));
        }
        Ok(Self {
            dim,
            dt,
            forcing_mean: 8.0,
            forcing_sd: 1.0,
        })
    }

    pub fn deterministic(mut self) -> Self {
        self.forcing_sd = 0.0;
        self
    }
}

impl Dynamics for Lorenz96 {
    fn dim(&self) -> usize {
        self.dim
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn step(&self, x: &DVector<f64>, rng: &mut SimRng) -> DVector<f64> {
        let forcing = standard_normal_vec(self.dim, rng).map(|z| self.forcing_mean + self.forcing_sd * z);
        rk4(x, self.dt, |s| lorenz96_rhs(s, &forcing))
    }
}

/// Noise model `(1−ε)·N(0, I) + ε·N(0, λI)` applied through `R^{1/2}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContaminationSpec {
    epsilon: f64,
    lambda: f64,
}

impl ContaminationSpec {
    pub fn new(epsilon: f64, lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::InvalidParameter(format!(
                "contamination probability must lie in [0, 1], got {epsilon}"
            )));
        }
        if !(lambda >= 1.0 && lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "variance inflation must be finite and at least 1, got {lambda}"
            )));
        }
        Ok(Self { epsilon, lambda })
    }

    pub fn well_specified() -> Self {
        Self {
            epsilon: 0.0,
            lambda: 1.0,
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Draws both mixture components, then picks one with a Bernoulli(ε).
    /// Returns the standardized noise and whether the inflated branch fired.
    pub fn sample(
        &self,
        d: usize,
        noise_rng: &mut SimRng,
        branch_rng: &mut SimRng,
    ) -> (DVector<f64>, bool) {
        let clean = standard_normal_vec(d, noise_rng);
        let wide = standard_normal_vec(d, noise_rng) * self.lambda.sqrt();
        let flag = branch_rng.random_bool(self.epsilon);
        (if flag { wide } else { clean }, flag)
    }
}

/// Adds contaminated noise `R^{1/2} v` to each column of `clean`.
pub fn contaminate(
    clean: &DMatrix<f64>,
    r: &DMatrix<f64>,
    spec: &ContaminationSpec,
    noise_rng: &mut SimRng,
    branch_rng: &mut SimRng,
) -> Result<(DMatrix<f64>, Vec<bool>)> {
    check_dim("observation noise covariance", clean.nrows(), r.nrows())?;
    let root = psd_sqrt(r, 1e-10)?;
    let mut noisy = clean.clone();
    let mut flags = Vec::with_capacity(clean.ncols());
    for mut col in noisy.column_iter_mut() {
        let (v, flag) = spec.sample(clean.nrows(), noise_rng, branch_rng);
        col += &root * v;
        flags.push(flag);
    }
    Ok((noisy, flags))
}

/// Truth and observations of one twin experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    /// Time of each state column.
    pub times: Vec<f64>,
    /// `d_X × (n_steps + 1)`, column 0 is the initial state.
    pub states: DMatrix<f64>,
    /// `d_Y × n_obs`.
    pub observations: DMatrix<f64>,
    /// State column of each observation.
    pub obs_times: Vec<usize>,
    pub contamination_flags: Vec<bool>,
}

impl TrajectoryRecord {
    pub fn n_obs(&self) -> usize {
        self.obs_times.len()
    }

    pub fn observation(&self, k: usize) -> DVector<f64> {
        self.observations.column(k).into_owned()
    }

    pub fn observation_list(&self) -> Vec<DVector<f64>> {
        (0..self.n_obs()).map(|k| self.observation(k)).collect()
    }

    /// True states at the observation times, `d_X × n_obs`.
    pub fn observed_states(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.states.nrows(), self.n_obs(), |i, k| {
            self.states[(i, self.obs_times[k])]
        })
    }

    /// Columns: `step,time,state_0..state_{d-1}`.
    pub fn write_states_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "step,time")?;
        for i in 0..self.states.nrows() {
            write!(w, ",state_{i}")?;
        }
        writeln!(w)?;
        for (n, col) in self.states.column_iter().enumerate() {
            write!(w, "{n},{}", self.times[n])?;
            for v in col.iter() {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Columns: `obs_index,time,y_0..y_{d-1},contaminated`.
    pub fn write_observations_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "obs_index,time")?;
        for i in 0..self.observations.nrows() {
            write!(w, ",y_{i}")?;
        }
        writeln!(w, ",contaminated")?;
        for (k, col) in self.observations.column_iter().enumerate() {
            write!(w, "{k},{}", self.times[self.obs_times[k]])?;
            for v in col.iter() {
                write!(w, ",{v}")?;
            }
            writeln!(w, ",{}", u8::from(self.contamination_flags[k]))?;
        }
        Ok(())
    }
}

/// Integrates `dynamics` from `x0` for `n_steps`, observing every
/// `steps_per_obs` steps through `observation` with contaminated noise.
/// Truth, noise and branch draws use separate streams of `seed`.
pub fn simulate(
    dynamics: &dyn Dynamics,
    x0: &DVector<f64>,
    n_steps: usize,
    steps_per_obs: usize,
    observation: &LinearObservation,
    contamination: &ContaminationSpec,
    seed: u64,
) -> Result<TrajectoryRecord> {
    check_dim("initial state", dynamics.dim(), x0.len())?;
    check_dim("observation operator", dynamics.dim(), observation.state_dim())?;
    if steps_per_obs == 0 {
        return Err(Error::InvalidParameter("steps_per_obs must be positive".into()));
    }
    let mut truth_rng = stream_rng(seed, Stream::Truth);
    let dt = dynamics.dt();
    let mut states = DMatrix::zeros(x0.len(), n_steps + 1);
    states.set_column(0, x0);
    let mut x = x0.clone();
    let mut obs_times = Vec::with_capacity(n_steps / steps_per_obs);
    for n in 1..=n_steps {
        x = dynamics.step(&x, &mut truth_rng);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("true state at step {n}")));
        }
        states.set_column(n, &x);
        if n % steps_per_obs == 0 {
            obs_times.push(n);
        }
    }
    let mut clean = DMatrix::zeros(observation.h().nrows(), obs_times.len());
    for (k, &n) in obs_times.iter().enumerate() {
        clean.set_column(k, &(observation.h() * states.column(n)));
    }
    let (observations, flags) = contaminate(
        &clean,
        observation.r(),
        contamination,
        &mut stream_rng(seed, Stream::Observation),
        &mut stream_rng(seed, Stream::Contamination),
    )?;
    Ok(TrajectoryRecord {
        times: (0..=n_steps).map(|n| n as f64 * dt).collect(),
        states,
        observations,
        obs_times,
        contamination_flags: flags,
    })
}

fn step_count(span: f64, dt: f64, what: &str) -> Result<usize> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    let n = span / dt;
    let rounded = n.round();
    if (n - rounded).abs() > 1e-9 * rounded.max(1.0) {
        return Err(Error::InvalidParameter(format!(
            "{what} = {span} is not an integer multiple of dt = {dt}"
        )));
    }
    Ok(rounded as usize)
}

/// Scalar OU model: `A = 0.7`, `Q = 1.3`, `H = 1`, `R = 0.1`, `x₀ = 5`.
pub fn ou_model() -> Result<LgssModel> {
    let s = |v| DMatrix::from_element(1, 1, v);
    let prior = GaussianBelief::new(DVector::from_element(1, 5.0), s(LINEAR_PRIOR_VAR))?;
    LgssModel::new(s(0.7), s(1.3), s(1.0), s(0.1), prior)
}

pub fn simulate_ou(
    t_end: f64,
    dt: f64,
    contamination: &ContaminationSpec,
    seed: u64,
) -> Result<(TrajectoryRecord, LgssModel)> {
    let model = ou_model()?;
    let n = step_count(t_end, dt, "t_end")?;
    let dynamics = LinearGaussian::from_model(&model, dt)?;
    let record = simulate(
        &dynamics,
        model.prior().mean(),
        n,
        1,
        &model.observation(),
        contamination,
        seed,
    )?;
    Ok((record, model))
}

/// Constant-velocity model in the plane; state `(p₁, p₂, v₁, v₂)`,
/// positions observed with `R = [[Δt², Δt³], [Δt³, Δt²]]`.
pub fn tracking_model(dt: f64) -> Result<LgssModel> {
    let (d2, d3) = (dt * dt, dt * dt * dt);
    #[rustfmt::skip]
    let a = DMatrix::from_row_slice(4, 4, &[
        1.0, 0.0, dt, 0.0,
        0.0, 1.0, 0.0, dt,
        0.0, 0.0, 1.0, 0.0,
        0.0, 0.0, 0.0, 1.0,
    ]);
    #[rustfmt::skip]
    let q = DMatrix::from_row_slice(4, 4, &[
        d3 / 3.0, 0.0, d2 / 2.0, 0.0,
        0.0, d3 / 3.0, 0.0, d2 / 2.0,
        d2 / 2.0, 0.0, dt, 0.0,
        0.0, d2 / 2.0, 0.0, dt,
    ]);
    let h = DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    let r = DMatrix::from_row_slice(2, 2, &[d2, d3, d3, d2]);
    let prior = GaussianBelief::isotropic(DVector::from_vec(vec![0.0, 0.0, 1.0, 1.0]), LINEAR_PRIOR_VAR)?;
    LgssModel::new(a, q, h, r, prior)
}

pub fn simulate_target_tracking(
    t_end: f64,
    dt: f64,
    contamination: &ContaminationSpec,
    seed: u64,
) -> Result<(TrajectoryRecord, LgssModel)> {
    let model = tracking_model(dt)?;
    let n = step_count(t_end, dt, "t_end")?;
    let dynamics = LinearGaussian::from_model(&model, dt)?;
    let record = simulate(
        &dynamics,
        model.prior().mean(),
        n,
        1,
        &model.observation(),
        contamination,
        seed,
    )?;
    Ok((record, model))
}

/// Observation setup and initial ensemble law of a nonlinear experiment.
#[derive(Debug, Clone)]
pub struct NonlinearSetup {
    pub observation: LinearObservation,
    pub steps_per_obs: usize,
    /// Mean of the initial ensemble.
    pub initial_state: DVector<f64>,
    /// Initial ensemble covariance is `initial_var · I`.
    pub initial_var: f64,
}

pub const LORENZ63_X0: [f64; 3] = [-0.587, -0.563, 16.87];

pub fn simulate_lorenz63(
    t_end: f64,
    dt: f64,
    t_out: f64,
    contamination: &ContaminationSpec,
    seed: u64,
) -> Result<(TrajectoryRecord, NonlinearSetup)> {
    let n = step_count(t_end, dt, "t_end")?;
    let every = step_count(t_out, dt, "t_out")?;
    let observation = LinearObservation::new(
        DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]),
        DMatrix::from_element(1, 1, 0.5),
    )?;
    let x0 = DVector::from_row_slice(&LORENZ63_X0);
    let record = simulate(&Lorenz63::new(dt), &x0, n, every, &observation, contamination, seed)?;
    Ok((
        record,
        NonlinearSetup {
            observation,
            steps_per_obs: every,
            initial_state: x0,
            initial_var: 0.1,
        },
    ))
}

/// Lorenz-96 run after a burn-in from a perturbed rest state. The burn-in
/// uses its own stream and is not recorded; the recorded run starts at the
/// burned-in state.
pub fn simulate_lorenz96(
    d: usize,
    t_end: f64,
    dt: f64,
    t_out: f64,
    burn_in: f64,
    contamination: &ContaminationSpec,
    seed: u64,
) -> Result<(TrajectoryRecord, NonlinearSetup)> {
    let dynamics = Lorenz96::new(d, dt)?;
    let n = step_count(t_end, dt, "t_end")?;
    let every = step_count(t_out, dt, "t_out")?;
    let n_burn = step_count(burn_in, dt, "burn_in")?;
    let mut burn_rng = stream_rng(seed, Stream::BurnIn);
    let start = DVector::from_element(d, 8.0) + standard_normal_vec(d, &mut burn_rng);
    let x0 = dynamics.advance(&start, n_burn, &mut burn_rng);
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Lorenz-96 burn-in".into()));
    }
    let observation = LinearObservation::new(DMatrix::identity(d, d), DMatrix::identity(d, d))?;
    let record = simulate(&dynamics, &x0, n, every, &observation, contamination, seed)?;
    Ok((
        record,
        NonlinearSetup {
            observation,
            steps_per_obs: every,
            initial_state: x0,
            initial_var: 1.0,
        },
    ))
}

//! Single runs and Monte-Carlo sweeps.

use rayon::prelude::*;
use robust_da::metrics::MetricReport;
use robust_da::rng::derive_seed;
use serde::Serialize;

use crate::config::{ContaminationConfig, ExperimentConfig, FilterKind};
use crate::error::{BenchError, BenchResult};
use crate::experiment::Experiment;
use crate::filters::{run_filter, FilterFailure, FilterTrace};

/// Outcome of one filter on one trajectory.
#[derive(Debug, Clone)]
pub struct MethodOutcome {
    pub trace: FilterTrace,
    /// Missing when the filter failed.
    pub metrics: Option<MetricReport>,
}

pub struct SingleRun {
    pub experiment: Experiment,
    pub outcomes: Vec<MethodOutcome>,
    pub seed: u64,
}

impl SingleRun {
    pub fn outcome(&self, filter: FilterKind) -> Option<&MethodOutcome> {
        self.outcomes.iter().find(|o| o.trace.filter == filter)
    }

    pub fn any_failed(&self) -> bool {
        self.outcomes.iter().any(|o| o.metrics.is_none())
    }
}

fn score(cfg: &ExperimentConfig, exp: &Experiment, trace: FilterTrace) -> MethodOutcome {
    let mut trace = trace;
    let metrics = if trace.completed() {
        match MetricReport::compute(&exp.truth(), &trace.means, &trace.covariances, cfg.diagonalize_qic()) {
            Ok(m) => Some(m),
            Err(e) => {
                trace.failure = Some(FilterFailure {
                    step: trace.means.len(),
                    message: format!("scoring: {e}"),
                });
                None
            }
        }
    } else {
        None
    };
    MethodOutcome { trace, metrics }
}

/// Runs every configured filter on one replicate. All filters see the same
/// truth and observations.
pub fn run_replicate(
    cfg: &ExperimentConfig,
    contamination: &ContaminationConfig,
    ensemble_size: Option<usize>,
    seed: u64,
) -> BenchResult<SingleRun> {
    let experiment = Experiment::simulate(cfg, &contamination.spec()?, seed)?;
    let mut outcomes = Vec::with_capacity(cfg.filters.len());
    for &f in &cfg.filters {
        let trace = run_filter(cfg, f, &experiment, seed, ensemble_size)?;
        outcomes.push(score(cfg, &experiment, trace));
    }
    Ok(SingleRun {
        experiment,
        outcomes,
        seed,
    })
}

/// One run at the configured contamination and the master seed.
pub fn run_single(cfg: &ExperimentConfig) -> BenchResult<SingleRun> {
    cfg.validate()?;
    run_replicate(cfg, &cfg.contamination, None, cfg.seed)
}

/// Grid point of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Cell {
    pub index: usize,
    pub epsilon: f64,
    pub sqrt_lambda: f64,
    pub ensemble_size: Option<usize>,
}

/// Metrics of one filter on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateRecord {
    pub cell: usize,
    pub replicate: usize,
    pub seed: u64,
    pub filter: FilterKind,
    pub rmse: Option<f64>,
    pub q_ic: Option<f64>,
    pub failure: Option<FilterFailure>,
}

/// Aggregate over the replicates of one cell and filter. Means and standard
/// errors use successful replicates only.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub cell: Cell,
    pub filter: FilterKind,
    pub replicates: usize,
    pub failures: usize,
    pub mean_rmse: f64,
    pub se_rmse: f64,
    pub mean_q_ic: f64,
    pub se_q_ic: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Contamination,
    EnsembleSize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub kind: SweepKind,
    pub mc_reps: usize,
    pub epsilons: Vec<f64>,
    pub sqrt_lambdas: Vec<f64>,
    pub sizes: Vec<usize>,
    pub cells: Vec<Cell>,
    pub summaries: Vec<CellSummary>,
    pub replicates: Vec<ReplicateRecord>,
}

impl SweepResult {
    pub fn summary(&self, cell: usize, filter: FilterKind) -> Option<&CellSummary> {
        self.summaries
            .iter()
            .find(|s| s.cell.index == cell && s.filter == filter)
    }

    pub fn total_failures(&self) -> usize {
        self.summaries.iter().map(|s| s.failures).sum()
    }
}

/// Mean and standard error of the mean; NaN mean for no data, zero SE for one value.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

fn replicate_records(
    cfg: &ExperimentConfig,
    cell: &Cell,
    replicate: usize,
) -> Vec<ReplicateRecord> {
    let seed = derive_seed(cfg.seed, cell.index as u64, replicate as u64);
    let contamination = ContaminationConfig {
        epsilon: cell.epsilon,
        sqrt_lambda: cell.sqrt_lambda,
    };
    let record = |filter, rmse, q_ic, failure| ReplicateRecord {
        cell: cell.index,
        replicate,
        seed,
        filter,
        rmse,
        q_ic,
        failure,
    };
    match run_replicate(cfg, &contamination, cell.ensemble_size, seed) {
        Ok(run) => run
            .outcomes
            .into_iter()
            .map(|o| match o.metrics {
                Some(m) => record(o.trace.filter, Some(m.rmse), Some(m.q_ic), None),
                None => record(o.trace.filter, None, None, o.trace.failure),
            })
            .collect(),
        Err(e) => cfg
            .filters
            .iter()
            .map(|&f| {
                record(
                    f,
                    None,
                    None,
                    Some(FilterFailure {
                        step: 0,
                        message: e.to_string(),
                    }),
                )
            })
            .collect(),
    }
}

fn summarize(cfg: &ExperimentConfig, cells: &[Cell], replicates: &[ReplicateRecord]) -> Vec<CellSummary> {
    let mut out = Vec::with_capacity(cells.len() * cfg.filters.len());
    for cell in cells {
        for &filter in &cfg.filters {
            let rows: Vec<&ReplicateRecord> = replicates
                .iter()
                .filter(|r| r.cell == cell.index && r.filter == filter)
                .collect();
            let rmse: Vec<f64> = rows.iter().filter_map(|r| r.rmse).collect();
            let q_ic: Vec<f64> = rows.iter().filter_map(|r| r.q_ic).collect();
            let (mean_rmse, se_rmse) = mean_and_se(&rmse);
            let (mean_q_ic, se_q_ic) = mean_and_se(&q_ic);
            out.push(CellSummary {
                cell: *cell,
                filter,
                replicates: rows.len(),
                failures: rows.iter().filter(|r| r.failure.is_some()).count(),
                mean_rmse,
                se_rmse,
                mean_q_ic,
                se_q_ic,
            });
        }
    }
    out
}

fn run_cells(cfg: &ExperimentConfig, cells: Vec<Cell>, kind: SweepKind, threads: Option<usize>) -> BenchResult<SweepResult> {
    cfg.validate()?;
    if cells.is_empty() {
        return Err(BenchError::Config("sweep grid is empty".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..cfg.mc_reps).map(move |r| (c, r)))
        .collect();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| BenchError::Pool(e.to_string()))?;
    let replicates: Vec<ReplicateRecord> = pool.install(|| {
        jobs.par_iter()
            .map(|&(c, r)| replicate_records(cfg, &cells[c], r))
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect()
    });
    let summaries = summarize(cfg, &cells, &replicates);
    let mut epsilons: Vec<f64> = Vec::new();
    let mut sqrt_lambdas: Vec<f64> = Vec::new();
    let mut sizes: Vec<usize> = Vec::new();
    for c in &cells {
        if !epsilons.contains(&c.epsilon) {
            epsilons.push(c.epsilon);
        }
        if !sqrt_lambdas.contains(&c.sqrt_lambda) {
            sqrt_lambdas.push(c.sqrt_lambda);
        }
        if let Some(m) = c.ensemble_size {
            sizes.push(m);
        }
    }
    Ok(SweepResult {
        kind,
        mc_reps: cfg.mc_reps,
        epsilons,
        sqrt_lambdas,
        sizes,
        cells,
        summaries,
        replicates,
    })
}

/// Contamination sweep over `epsilons × sqrt_lambdas`, row-major in ε.
/// Replicate seeds depend only on the master seed, the cell and the
/// replicate index, so results do not depend on `threads`.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    epsilons: &[f64],
    sqrt_lambdas: &[f64],
    threads: Option<usize>,
) -> BenchResult<SweepResult> {
    let mut cells = Vec::with_capacity(epsilons.len() * sqrt_lambdas.len());
    for &epsilon in epsilons {
        for &sqrt_lambda in sqrt_lambdas {
            cells.push(Cell {
                index: cells.len(),
                epsilon,
                sqrt_lambda,
                ensemble_size: None,
            });
        }
    }
    run_cells(cfg, cells, SweepKind::Contamination, threads)
}

/// Sweep over ensemble sizes at the configured contamination.
pub fn run_ensemble_size_sweep(
    cfg: &ExperimentConfig,
    sizes: &[usize],
    threads: Option<usize>,
) -> BenchResult<SweepResult> {
    if sizes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(BenchError::Config("ensemble sizes must be strictly increasing".into()));
    }
    if sizes.iter().any(|&m| m < 2) {
        return Err(BenchError::Config("ensemble sizes must be at least 2".into()));
    }
    let cells = sizes
        .iter()
        .enumerate()
        .map(|(index, &m)| Cell {
            index,
            epsilon: cfg.contamination.epsilon,
            sqrt_lambda: cfg.contamination.sqrt_lambda,
            ensemble_size: Some(m),
        })
        .collect();
    run_cells(cfg, cells, SweepKind::EnsembleSize, threads)
}

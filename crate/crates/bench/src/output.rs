//! CSV and JSON writers. Layouts are described in FORMATS.md.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use crate::config::{ExperimentConfig, FilterKind};
use crate::error::{io_err, BenchError, BenchResult};
use crate::filters::FilterFailure;
use crate::runner::{SingleRun, SweepKind, SweepResult};

/// Version of every file layout written here.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl Format {
    fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

fn create(path: &Path) -> BenchResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn csv_writer(path: &Path) -> BenchResult<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(create(path)?))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> BenchError + '_ {
    move |e| BenchError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> BenchResult<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

fn num(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        String::new()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// Per-step rows of one filter: `(step, time, truth, mean, var, k², flag)`.
#[derive(Serialize)]
struct StepRow<'a> {
    step: usize,
    time: f64,
    truth: Vec<f64>,
    mean: &'a [f64],
    variance: Vec<f64>,
    k_sq: Option<f64>,
    contaminated: bool,
}

fn step_rows<'a>(run: &'a SingleRun, filter: FilterKind) -> Vec<StepRow<'a>> {
    let exp = &run.experiment;
    let truth = exp.truth();
    let outcome = run.outcome(filter).expect("filter was run");
    let tr = &outcome.trace;
    (0..tr.means.len())
        .map(|k| StepRow {
            step: k + 1,
            time: exp.record.times[exp.record.obs_times[k]],
            truth: truth.column(k).iter().copied().collect(),
            mean: tr.means[k].as_slice(),
            variance: tr.covariances[k].diagonal().iter().copied().collect(),
            k_sq: Some(tr.k_sq[k]).filter(|v| v.is_finite()),
            contaminated: exp.record.contamination_flags[k],
        })
        .collect()
}

fn write_steps_csv(path: &Path, rows: &[StepRow<'_>], d: usize) -> BenchResult<()> {
    let err = csv_err(path);
    let mut w = csv_writer(path)?;
    let mut header = vec!["step".to_string(), "time".to_string()];
    for prefix in ["truth", "mean", "var"] {
        header.extend((0..d).map(|i| format!("{prefix}_{i}")));
    }
    header.extend(["k_sq".to_string(), "contaminated".to_string()]);
    w.write_record(&header).map_err(&err)?;
    for r in rows {
        let mut rec = vec![r.step.to_string(), num(r.time)];
        rec.extend(r.truth.iter().map(|v| num(*v)));
        rec.extend(r.mean.iter().map(|v| num(*v)));
        rec.extend(r.variance.iter().map(|v| num(*v)));
        rec.push(opt(r.k_sq));
        rec.push(u8::from(r.contaminated).to_string());
        w.write_record(&rec).map_err(&err)?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Serialize)]
struct MethodSummary<'a> {
    filter: FilterKind,
    status: &'static str,
    rmse: Option<f64>,
    q_ic: Option<f64>,
    ci_coverage_95: Option<f64>,
    steps_completed: usize,
    failure: Option<&'a FilterFailure>,
}

/// Writes `steps_<filter>.{csv,json}` for every filter and `summary.json`.
/// Returns the written paths.
pub fn write_single_run(
    cfg: &ExperimentConfig,
    run: &SingleRun,
    dir: &Path,
    format: Format,
) -> BenchResult<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    let d = run.experiment.record.states.nrows();
    for o in &run.outcomes {
        let filter = o.trace.filter;
        let rows = step_rows(run, filter);
        let path = dir.join(format!("steps_{}.{}", filter.name(), format.extension()));
        match format {
            Format::Csv => write_steps_csv(&path, &rows, d)?,
            Format::Json => write_json(&path, &json!({ "schema_version": SCHEMA_VERSION, "rows": rows }))?,
        }
        written.push(path);
    }
    let methods: Vec<MethodSummary> = run
        .outcomes
        .iter()
        .map(|o| MethodSummary {
            filter: o.trace.filter,
            status: if o.metrics.is_some() { "ok" } else { "failed" },
            rmse: o.metrics.as_ref().map(|m| m.rmse),
            q_ic: o.metrics.as_ref().map(|m| m.q_ic),
            ci_coverage_95: o.metrics.as_ref().map(|m| m.ci_coverage_95),
            steps_completed: o.trace.means.len(),
            failure: o.trace.failure.as_ref(),
        })
        .collect();
    let summary = json!({
        "schema_version": SCHEMA_VERSION,
        "kind": "single",
        "model": cfg.model,
        "seed": run.seed,
        "horizon": cfg.horizon(),
        "n_observations": run.experiment.record.n_obs(),
        "n_contaminated": run.experiment.record.contamination_flags.iter().filter(|f| **f).count(),
        "diagonalized_qic": cfg.diagonalize_qic(),
        "config": cfg,
        "methods": methods,
    });
    let path = dir.join("summary.json");
    write_json(&path, &summary)?;
    written.push(path);
    Ok(written)
}

/// `M^{-1/2}` reference scaled to pass through the first finite mean RMSE
/// of `filter`.
fn mc_rate_reference(result: &SweepResult, filter: FilterKind, size: usize) -> Option<f64> {
    let first = result
        .summaries
        .iter()
        .find(|s| s.filter == filter && s.mean_rmse.is_finite())?;
    let m0 = first.cell.ensemble_size? as f64;
    Some(first.mean_rmse * (m0 / size as f64).sqrt())
}

fn write_sweep_table_csv(path: &Path, result: &SweepResult) -> BenchResult<()> {
    let err = csv_err(path);
    let mut w = csv_writer(path)?;
    let sized = result.kind == SweepKind::EnsembleSize;
    let mut header = vec![
        "cell", "epsilon", "sqrt_lambda", "ensemble_size", "filter", "mc_reps", "replicates",
        "failures", "mean_rmse", "se_rmse", "mean_q_ic", "se_q_ic",
    ];
    if sized {
        header.extend(["inv_sqrt_m", "mc_rate_reference"]);
    }
    w.write_record(&header).map_err(&err)?;
    for s in &result.summaries {
        let mut rec = vec![
            s.cell.index.to_string(),
            num(s.cell.epsilon),
            num(s.cell.sqrt_lambda),
            s.cell.ensemble_size.map(|m| m.to_string()).unwrap_or_default(),
            s.filter.name().to_string(),
            result.mc_reps.to_string(),
            s.replicates.to_string(),
            s.failures.to_string(),
            num(s.mean_rmse),
            num(s.se_rmse),
            num(s.mean_q_ic),
            num(s.se_q_ic),
        ];
        if let (true, Some(m)) = (sized, s.cell.ensemble_size) {
            rec.push(num(1.0 / (m as f64).sqrt()));
            rec.push(opt(mc_rate_reference(result, s.filter, m)));
        }
        w.write_record(&rec).map_err(&err)?;
    }
    w.flush().map_err(io_err(path))
}

fn write_replicates_csv(path: &Path, result: &SweepResult) -> BenchResult<()> {
    let err = csv_err(path);
    let mut w = csv_writer(path)?;
    w.write_record([
        "cell", "replicate", "seed", "filter", "status", "rmse", "q_ic", "failure_step", "message",
    ])
    .map_err(&err)?;
    for r in &result.replicates {
        let (status, step, msg) = match &r.failure {
            None => ("ok", String::new(), String::new()),
            Some(f) => ("failed", f.step.to_string(), f.message.clone()),
        };
        w.write_record([
            r.cell.to_string(),
            r.replicate.to_string(),
            r.seed.to_string(),
            r.filter.name().to_string(),
            status.to_string(),
            opt(r.rmse),
            opt(r.q_ic),
            step,
            msg,
        ])
        .map_err(&err)?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes `sweep.{csv,json}` (one row per cell and filter),
/// `replicates.{csv,json}` and `sweep_summary.json`.
pub fn write_sweep(
    cfg: &ExperimentConfig,
    result: &SweepResult,
    dir: &Path,
    format: Format,
) -> BenchResult<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let table = dir.join(format!("sweep.{}", format.extension()));
    let reps = dir.join(format!("replicates.{}", format.extension()));
    match format {
        Format::Csv => {
            write_sweep_table_csv(&table, result)?;
            write_replicates_csv(&reps, result)?;
        }
        Format::Json => {
            write_json(&table, &json!({ "schema_version": SCHEMA_VERSION, "rows": result.summaries }))?;
            write_json(&reps, &json!({ "schema_version": SCHEMA_VERSION, "rows": result.replicates }))?;
        }
    }
    let summary_path = dir.join("sweep_summary.json");
    write_json(
        &summary_path,
        &json!({
            "schema_version": SCHEMA_VERSION,
            "kind": result.kind,
            "model": cfg.model,
            "seed": cfg.seed,
            "mc_reps": result.mc_reps,
            "epsilons": result.epsilons,
            "sqrt_lambdas": result.sqrt_lambdas,
            "sizes": result.sizes,
            "filters": cfg.filters,
            "total_failures": result.total_failures(),
            "config": cfg,
        }),
    )?;
    Ok(vec![table, reps, summary_path])
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use robust_da_bench::config::{preset_names, ExperimentConfig};
use robust_da_bench::output::{write_single_run, write_sweep, Format};
use robust_da_bench::runner::{run_ensemble_size_sweep, run_single, run_sweep};
use robust_da_bench::verify::{run_verification, tune_unit_weight};
use robust_da_bench::BenchResult;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => Format::Csv,
            FormatArg::Json => Format::Json,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "robust-da", version, about = "Robust data-assimilation twin experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    /// Path to a TOML config or the name of a preset.
    #[arg(long)]
    config: String,
    /// Overrides the master seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's output_dir, then `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = "ROBUST_DA_THREADS")]
    threads: Option<usize>,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every configured filter on one trajectory.
    Run(RunArgs),
    /// Monte-Carlo sweep over the contamination grid.
    Sweep(RunArgs),
    /// Monte-Carlo sweep over ensemble sizes.
    SizeSweep(RunArgs),
    /// Tune the IMQ threshold so that E[2k²] = 1 under a χ² residual.
    Tune {
        #[arg(long)]
        dy: usize,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Heavy Monte-Carlo checks of the weight kernel and robustness.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// List the built-in presets.
    Presets,
}

fn load(args: &RunArgs) -> BenchResult<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok((cfg, out))
}

fn report(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

/// Returns whether every run succeeded.
fn execute(command: Command) -> BenchResult<bool> {
    match command {
        Command::Run(args) => {
            let (cfg, out) = load(&args)?;
            let run = run_single(&cfg)?;
            for o in &run.outcomes {
                match (&o.metrics, &o.trace.failure) {
                    (Some(m), _) => println!(
                        "{:<10} rmse {:.4}  q-ic {:.4}  coverage {:.3}",
                        o.trace.filter.name(),
                        m.rmse,
                        m.q_ic,
                        m.ci_coverage_95
                    ),
                    (None, Some(f)) => println!(
                        "{:<10} failed at step {}: {}",
                        o.trace.filter.name(),
                        f.step,
                        f.message
                    ),
                    (None, None) => unreachable!("a filter without metrics has a failure"),
                }
            }
            report(&write_single_run(&cfg, &run, &out, args.format.into())?);
            Ok(!run.any_failed())
        }
        Command::Sweep(args) => {
            let (cfg, out) = load(&args)?;
            let (eps, lam) = if cfg.sweep.epsilons.is_empty() || cfg.sweep.sqrt_lambdas.is_empty() {
                (vec![cfg.contamination.epsilon], vec![cfg.contamination.sqrt_lambda])
            } else {
                (cfg.sweep.epsilons.clone(), cfg.sweep.sqrt_lambdas.clone())
            };
            let result = run_sweep(&cfg, &eps, &lam, args.threads)?;
            report(&write_sweep(&cfg, &result, &out, args.format.into())?);
            eprintln!("{} failed replicates", result.total_failures());
            Ok(result.total_failures() == 0)
        }
        Command::SizeSweep(args) => {
            let (cfg, out) = load(&args)?;
            let sizes = if cfg.sweep.sizes.is_empty() {
                vec![cfg.ensemble.size]
            } else {
                cfg.sweep.sizes.clone()
            };
            let result = run_ensemble_size_sweep(&cfg, &sizes, args.threads)?;
            report(&write_sweep(&cfg, &result, &out, args.format.into())?);
            eprintln!("{} failed replicates", result.total_failures());
            Ok(result.total_failures() == 0)
        }
        Command::Tune { dy, samples, seed } => {
            let q = tune_unit_weight(dy, samples, seed)?;
            println!("d_y = {dy}: q² = {q:.4}");
            Ok(true)
        }
        Command::Verify { seed } => {
            let checks = run_verification(seed)?;
            for c in &checks {
                let tag = if c.passed { "PASS" } else { "FAIL" };
                println!("{tag}  {}  ({})", c.name, c.detail);
            }
            Ok(checks.iter().all(|c| c.passed))
        }
        Command::Presets => {
            for name in preset_names() {
                println!("{name}");
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

//! `rbl` — Monte-Carlo benchmark harness for the rigid body localization
//! estimators: RMSE sweeps over noise levels, convergence traces, and
//! runtime measurement, all written as CSV plus a resolved-config manifest.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rbl_core::harness::{
    self, convergence_to_csv, records_to_csv, run_convergence, run_runtime, run_sweep,
    runtime_to_csv, Estimator, ExperimentConfig, Scenario,
};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "rbl", version, about = "Rigid body localization benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOpts {
    /// Noise levels sigma (range error std, meters), comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1e-3, 1e-2, 1e-1, 1.0])]
    sigma: Vec<f64>,

    /// Monte-Carlo trials per noise level.
    #[arg(long, default_value_t = 200)]
    trials: usize,

    /// Master seed; every trial derives its own streams from it.
    #[arg(long, default_value_t = 1)]
    seed: u64,

    /// Damping factor of the message passing updates.
    #[arg(long, default_value_t = 0.5)]
    rho: f64,

    /// Maximum message passing iterations.
    #[arg(long, default_value_t = 30)]
    jmax: usize,

    /// Doppler noise coupling factor (sigma_doppler / sigma_range).
    #[arg(long, default_value_t = 10.0)]
    coupling: f64,

    /// Conformation file ("M N" header, M anchor rows, N sensor rows);
    /// defaults to the built-in cube layout.
    #[arg(long)]
    conformation: Option<PathBuf>,

    /// Leave measured wall times out of the CSV so repeated runs are
    /// byte-identical.
    #[arg(long)]
    no_timing: bool,

    /// Output CSV path; a resolved-config manifest is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// RMSE sweep over the noise grid for the selected estimators.
    Sweep {
        /// stationary (range only) or moving (range + Doppler).
        #[arg(long, default_value = "stationary")]
        scenario: Scenario,

        /// Estimators to run: gabp, ls, wls, mfb (comma separated).
        #[arg(long, value_delimiter = ',', default_values_t = vec![Estimator::Gabp, Estimator::Ls])]
        estimators: Vec<Estimator>,

        #[command(flatten)]
        common: CommonOpts,
    },
    /// Median per-iteration error traces of the four algorithms.
    Convergence {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Median wall time per algorithm invocation, plus an anchor-scaling probe.
    Runtime {
        /// Invocations per algorithm used for the median.
        #[arg(long, default_value_t = 200)]
        reps: usize,

        #[command(flatten)]
        common: CommonOpts,
    },
}

fn build_config(scenario: Scenario, common: &CommonOpts) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::new(scenario);
    cfg.sigma_grid = common.sigma.clone();
    cfg.trials = common.trials;
    cfg.seed = common.seed;
    cfg.doppler_factor = common.coupling;
    cfg.pipeline.damping = common.rho;
    cfg.pipeline.max_iterations = common.jmax;
    cfg.include_timing = !common.no_timing;
    if let Some(path) = &common.conformation {
        cfg.conformation = harness::read_conformation(path)
            .with_context(|| format!("reading conformation from {}", path.display()))?;
    }
    if !(0.0..=1.0).contains(&common.rho) {
        bail!("--rho must lie in [0, 1]");
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Sweep {
            scenario,
            estimators,
            common,
        } => {
            let mut cfg = build_config(scenario, &common)?;
            cfg.estimators = estimators;
            let records = run_sweep(&cfg).context("running the sweep")?;
            harness::write_output(&cfg, &records_to_csv(&records), &common.out)?;
            let diverged: usize = records.iter().map(|r| r.diverged).sum();
            eprintln!(
                "wrote {} records to {} ({} diverged trials counted)",
                records.len(),
                common.out.display(),
                diverged
            );
        }
        Command::Convergence { common } => {
            let cfg = build_config(Scenario::Moving, &common)?;
            let records = run_convergence(&cfg, &common.sigma).context("running convergence")?;
            harness::write_output(&cfg, &convergence_to_csv(&records), &common.out)?;
            let diverged: usize = records.iter().map(|r| r.diverged).sum();
            eprintln!(
                "wrote {} traces to {} ({} diverged trials counted)",
                records.len(),
                common.out.display(),
                diverged
            );
        }
        Command::Runtime { reps, common } => {
            let cfg = build_config(Scenario::Moving, &common)?;
            let report = run_runtime(&cfg, reps).context("measuring runtimes")?;
            harness::write_output(&cfg, &runtime_to_csv(&report), &common.out)?;
            for record in &report.records {
                eprintln!("{}: {:.4} ms median", record.algorithm, record.median_ms);
            }
        }
    }
    Ok(())
}

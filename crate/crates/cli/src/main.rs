mod commands;
mod output;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(
    name = "hosprate",
    version,
    about = "Hierarchical hospital outcome-rate models"
)]
struct Cli {
    /// Random seed recorded in every artifact.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
enum Command {
    /// Fit a model by Gibbs sampling.
    Fit(FitArgs),
    /// Rate report, classification counts and plot data for a fit.
    Report(ReportArgs),
    /// Posterior intervals of one standardized rate.
    Standardize(StandardizeArgs),
    /// Low/Average/High labels, optionally cross-tabulated against a second fit.
    Classify(ClassifyArgs),
    /// Log predictive Bayes factor of two fits on the held-out split.
    Compare(CompareArgs),
    /// Matched calibration study on the held-out split.
    Calibrate(CalibrateArgs),
    /// Generate a synthetic dataset.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug, Serialize)]
struct FitArgs {
    #[arg(long)]
    patients: PathBuf,
    #[arg(long)]
    hospitals: PathBuf,
    /// Model config (JSON); overrides --preset.
    #[arg(long)]
    model: Option<PathBuf>,
    /// CC, LC, SL or SLIL.
    #[arg(long, default_value = "CC")]
    preset: String,
    /// Fit on admission periods <= cutoff; the rest is held out.
    #[arg(long)]
    cutoff: Option<i64>,
    #[arg(long, default_value_t = 6000)]
    iterations: usize,
    #[arg(long, default_value_t = 1000)]
    burnin: usize,
    #[arg(long, default_value_t = 5)]
    thin: usize,
    #[arg(long, default_value_t = 4)]
    chains: usize,
    /// Fixed random-walk step for delta (adapted during burn-in otherwise).
    #[arg(long)]
    delta_step: Option<f64>,
}

#[derive(Args, Debug, Serialize, Clone)]
struct StdOpts {
    /// Reference effect for the expected rate.
    #[arg(long, value_enum, default_value_t = Mode::All)]
    mode: Mode,
    /// Volume-weighted hospital average in the expected rate.
    #[arg(long)]
    volume_weighted: bool,
    /// Average-patient approximations instead of the exact double sums.
    #[arg(long)]
    fast: bool,
    /// Cap on draws x hospitals x patients for the exact double sums.
    #[arg(long, default_value_t = 1e10)]
    budget: f64,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
enum Mode {
    All,
    HcMean,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
enum FunctionalArg {
    P,
    Is,
    Ds,
}

#[derive(Args, Debug, Serialize)]
struct ReportArgs {
    /// Directory written by `fit`.
    #[arg(long)]
    fit: PathBuf,
    #[arg(long, default_value_t = 0.15)]
    threshold: f64,
    /// Also render SVG scatterplots.
    #[arg(long)]
    svg: bool,
    #[command(flatten)]
    std: StdOpts,
}

#[derive(Args, Debug, Serialize)]
struct StandardizeArgs {
    #[arg(long)]
    fit: PathBuf,
    #[arg(long, value_enum, default_value_t = FunctionalArg::Ds)]
    functional: FunctionalArg,
    #[command(flatten)]
    std: StdOpts,
}

#[derive(Args, Debug, Serialize)]
struct ClassifyArgs {
    #[arg(long)]
    fit: PathBuf,
    /// Second fit to cross-classify against.
    #[arg(long)]
    against: Option<PathBuf>,
    #[arg(long, default_value_t = 0.15)]
    threshold: f64,
    #[command(flatten)]
    std: StdOpts,
}

#[derive(Args, Debug, Serialize)]
struct CompareArgs {
    #[arg(long)]
    fit: PathBuf,
    #[arg(long)]
    against: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct CalibrateArgs {
    /// Fits to compare; the first supplies the risk score.
    #[arg(long = "fit", required = true)]
    fits: Vec<PathBuf>,
    /// Study definition (JSON).
    #[arg(long)]
    study: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    /// Generator config (JSON); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Exit code of an error: 2 for numerical failures, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err
        .chain()
        .filter_map(|e| e.downcast_ref::<hosprate::Error>())
        .any(hosprate::Error::is_numerical);
    if numerical {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

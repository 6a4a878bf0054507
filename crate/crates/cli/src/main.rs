//! `ghive` command-line interface.
//!
//! Exit codes: 0 on success, 1 when the numerics fail, 2 for usage and
//! validation errors. Diagnostics are one line on stderr.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ghive::{GlmFamily, SeScale, DEFAULT_SEED};

#[derive(Parser)]
#[command(
    name = "ghive",
    version,
    about = "GLMs with hidden variables: estimation, inference and simulation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate Theta from CSV data and write the fit as JSON.
    Fit(FitArgs),
    /// Confidence interval for u^T Theta v from a saved fit.
    Infer(InferArgs),
    /// Draw synthetic data from a simulation config.
    Simulate(SimulateArgs),
    /// Re-run one of the simulation studies.
    Reproduce(ReproduceArgs),
    /// Monte Carlo approximation of the pseudo-true parameter F*.
    FstarOracle(FstarArgs),
}

#[derive(Clone, Copy, ValueEnum)]
pub enum FamilyArg {
    Gaussian,
    Bernoulli,
    Poisson,
}

impl From<FamilyArg> for GlmFamily {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Gaussian => GlmFamily::Gaussian,
            FamilyArg::Bernoulli => GlmFamily::Bernoulli,
            FamilyArg::Poisson => GlmFamily::Poisson,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum SeScaleArg {
    SumOverRootN,
    SumOverN,
}

impl From<SeScaleArg> for SeScale {
    fn from(s: SeScaleArg) -> Self {
        match s {
            SeScaleArg::SumOverRootN => SeScale::SumOverRootN,
            SeScaleArg::SumOverN => SeScale::SumOverN,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ExperimentArg {
    #[value(name = "fig1-bias")]
    Fig1Bias,
    #[value(name = "fig1-eta")]
    Fig1Eta,
    #[value(name = "fig2-n")]
    Fig2N,
    #[value(name = "fig2-m")]
    Fig2M,
    Table1,
}

#[derive(Args)]
pub struct FitArgs {
    /// Covariates, n x p CSV.
    #[arg(long)]
    pub x: PathBuf,
    /// Responses, n x M CSV.
    #[arg(long)]
    pub y: PathBuf,
    #[arg(long, value_enum)]
    pub family: FamilyArg,
    /// Number of hidden factors, or `auto` for the eigenvalue-ratio rule.
    #[arg(long, default_value = "auto")]
    pub k: String,
    /// Complement projector (M x M CSV) used instead of the PCA estimate.
    #[arg(long)]
    pub projector: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Centre and scale the columns of X.
    #[arg(long)]
    pub center: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct InferArgs {
    /// Fit JSON written by `ghive fit`.
    pub fit: PathBuf,
    #[arg(long)]
    pub x: PathBuf,
    #[arg(long)]
    pub y: PathBuf,
    /// Response contrast: CSV vector file or `e<i>` (1-based).
    #[arg(long)]
    pub u: String,
    /// Covariate contrast: CSV vector file or `e<i>` (1-based).
    #[arg(long)]
    pub v: String,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, value_enum, default_value = "sum-over-root-n")]
    pub se_scale: SeScaleArg,
    /// Output path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct SimulateArgs {
    /// Simulation config JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for the CSV files and truth.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ReproduceArgs {
    #[arg(value_enum)]
    pub experiment: ExperimentArg,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Output directory for the long and summary CSV files.
    #[arg(long)]
    pub out: PathBuf,
    /// Original replication counts and grids.
    #[arg(long)]
    pub full_scale: bool,
    /// Monte Carlo size for F*.
    #[arg(long)]
    pub n_mc: Option<usize>,
}

#[derive(Args)]
pub struct FstarArgs {
    /// Simulation config JSON.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 50_000)]
    pub n_mc: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn configure_threads() -> Result<(), commands::CliError> {
    let Ok(raw) = std::env::var("GHIVE_THREADS") else {
        return Ok(());
    };
    let n: usize =
        raw.trim().parse().ok().filter(|n| *n > 0).ok_or_else(|| {
            commands::CliError::Usage(format!("GHIVE_THREADS must be a positive integer, got {raw:?}"))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| commands::CliError::Usage(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Fit(a) => commands::fit(a),
        Command::Infer(a) => commands::infer(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Reproduce(a) => commands::reproduce(a),
        Command::FstarOracle(a) => commands::fstar_oracle(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = e.to_string().replace('\n', " ");
            eprintln!("error: {line}");
            ExitCode::from(e.exit_code())
        }
    }
}

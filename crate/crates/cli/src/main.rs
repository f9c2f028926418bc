use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use morphoscale::scalefit::{GroupBy, LogBase};
use morphoscale::votesim::RhoMode;
use serde::Serialize;

mod commands;

/// Crowd-label losses, vote simulation and scaling-law analysis.
#[derive(Debug, Parser)]
#[command(name = "morphoscale", version)]
struct Cli {
    /// Suppress the resolved-config echo and warnings on stderr.
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Campaign schema tools.
    #[command(subcommand)]
    Schema(SchemaCommand),
    /// Simulate volunteer votes from ground-truth concentrations.
    Simulate(SimulateArgs),
    /// Per-question and total log-likelihood of votes under given concentrations.
    Loss(LossArgs),
    /// Check the analytic likelihood gradient against finite differences.
    GradCheck(GradCheckArgs),
    /// Fit loss = m log(N) + b to run records by ensemble MCMC.
    FitScaling(FitScalingArgs),
    /// Predict loss at given dataset sizes, or emit a plot band from samples.
    Predict(PredictArgs),
    /// GP regression with an RBF + white-noise kernel.
    FitGp(FitGpArgs),
    /// Seed min/max aggregates of run records.
    Aggregate(AggregateArgs),
    /// Train a linear head on votes and features.
    TrainToy(TrainToyArgs),
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum SchemaCommand {
    /// Check a schema file; prints `ok` when every campaign is valid.
    Validate { file: PathBuf },
}

#[derive(Debug, Args, Serialize)]
struct SimulateArgs {
    #[arg(long)]
    schema: PathBuf,
    /// JSON-lines ground truth (`alpha_star` or `rho` per question).
    #[arg(long)]
    truth: PathBuf,
    /// Volunteers per galaxy.
    #[arg(long, default_value_t = 40, conflicts_with = "volunteer_range")]
    n_volunteers: u32,
    /// Draw volunteers per galaxy uniformly from MIN,MAX instead.
    #[arg(long, value_parser = parse_range, value_name = "MIN,MAX")]
    volunteer_range: Option<(u32, u32)>,
    #[arg(long, value_enum, default_value_t = RhoModeArg::SampleRhoPerGalaxy)]
    rho_mode: RhoModeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output vote records.
    #[arg(long)]
    out: PathBuf,
    /// Output ground truth plus the answer probabilities actually used.
    #[arg(long)]
    truth_out: Option<PathBuf>,
    /// Output synthetic features: answer probabilities plus Gaussian noise.
    #[arg(long)]
    features_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05, requires = "features_out")]
    feature_noise: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum RhoModeArg {
    FixedRho,
    SampleRhoPerGalaxy,
}

impl From<RhoModeArg> for RhoMode {
    fn from(m: RhoModeArg) -> Self {
        match m {
            RhoModeArg::FixedRho => RhoMode::FixedRho,
            RhoModeArg::SampleRhoPerGalaxy => RhoMode::SampleRhoPerGalaxy,
        }
    }
}

fn parse_range(s: &str) -> Result<(u32, u32), String> {
    let (a, b) = s.split_once(',').ok_or("expected MIN,MAX")?;
    let a = a.trim().parse().map_err(|e| format!("{e}"))?;
    let b = b.trim().parse().map_err(|e| format!("{e}"))?;
    Ok((a, b))
}

#[derive(Debug, Args, Serialize)]
struct LossArgs {
    #[arg(long)]
    schema: PathBuf,
    #[arg(long)]
    votes: PathBuf,
    /// JSON-lines concentrations, one line per galaxy.
    #[arg(long)]
    alpha: PathBuf,
    /// Leave out the multinomial coefficient.
    #[arg(long)]
    no_coefficient: bool,
}

#[derive(Debug, Args, Serialize)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of random configurations.
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
}

#[derive(Debug, Args, Serialize)]
struct FitScalingArgs {
    #[arg(long)]
    runs: PathBuf,
    /// Noise standard deviation, or `estimate` to pool it from seed replicates.
    #[arg(long, default_value = "0.052")]
    sigma: SigmaArg,
    #[arg(long, default_value = "10")]
    log_base: LogBase,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    walkers: usize,
    #[arg(long, default_value_t = 5000)]
    steps: usize,
    /// Defaults to 20% of the steps.
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long, default_value = "none")]
    group_by: GroupBy,
    /// Write post-burn-in `m,b` samples (single group only).
    #[arg(long)]
    samples_out: Option<PathBuf>,
    /// Write a median and 90% band over a log-spaced grid (single group only).
    #[arg(long)]
    plot_out: Option<PathBuf>,
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Debug, Clone, Copy)]
enum SigmaArg {
    Fixed(f64),
    Estimate,
}

impl Serialize for SigmaArg {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            SigmaArg::Fixed(v) => s.serialize_f64(*v),
            SigmaArg::Estimate => s.serialize_str("estimate"),
        }
    }
}

impl std::str::FromStr for SigmaArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "estimate" {
            return Ok(SigmaArg::Estimate);
        }
        s.parse()
            .map(SigmaArg::Fixed)
            .map_err(|_| format!("expected a number or `estimate`, got `{s}`"))
    }
}

#[derive(Debug, Args, Serialize)]
struct GridArgs {
    /// Smallest dataset size on the plot grid (default: smallest in the data).
    #[arg(long)]
    grid_min: Option<f64>,
    /// Largest dataset size on the plot grid (default: largest in the data).
    #[arg(long)]
    grid_max: Option<f64>,
    #[arg(long, default_value_t = 50)]
    grid_points: usize,
    /// Add observation noise with this standard deviation to the band.
    #[arg(long)]
    predictive_sigma: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
struct PredictArgs {
    #[arg(
        long,
        allow_hyphen_values = true,
        requires = "b",
        conflicts_with = "samples"
    )]
    m: Option<f64>,
    #[arg(long, allow_hyphen_values = true, requires = "m")]
    b: Option<f64>,
    /// `m,b` samples from `fit-scaling --samples-out`.
    #[arg(long)]
    samples: Option<PathBuf>,
    /// Dataset sizes to predict at (point mode).
    #[arg(long, num_args = 1..)]
    n: Vec<f64>,
    #[arg(long, default_value = "10")]
    log_base: LogBase,
    /// Decimals printed in point mode.
    #[arg(long, default_value_t = 3)]
    decimals: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    grid: GridArgs,
    /// Plot CSV destination (samples mode); stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct FitGpArgs {
    /// CSV with columns `x,y`.
    #[arg(long)]
    points: PathBuf,
    #[arg(long, default_value_t = morphoscale::gp::DEFAULT_LENGTH_SCALE)]
    length_scale: f64,
    /// Units the length scale is measured in: raw x, or log10 of x.
    #[arg(long, value_enum)]
    x_units: XUnits,
    /// Fix the signal variance instead of searching the grid (standardized scale).
    #[arg(long, requires = "noise_variance")]
    signal_variance: Option<f64>,
    #[arg(long, requires = "signal_variance")]
    noise_variance: Option<f64>,
    /// Band CSV `x,mean,lower2sigma,upper2sigma`.
    #[arg(long)]
    grid_out: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    grid_points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum XUnits {
    Raw,
    Log10,
}

#[derive(Debug, Args, Serialize)]
struct AggregateArgs {
    #[arg(long)]
    runs: PathBuf,
    /// JSON task mapping `{task: [column, ...]}`.
    #[arg(long)]
    tasks: Option<PathBuf>,
    /// Restrict per-task output to these tasks.
    #[arg(long)]
    task: Vec<String>,
    /// Print the canonical form of the runs file instead.
    #[arg(long)]
    canonical: bool,
}

#[derive(Debug, Args, Serialize)]
struct TrainToyArgs {
    #[arg(long)]
    schema: PathBuf,
    #[arg(long)]
    votes: PathBuf,
    /// JSON-lines `{galaxy_id, features}`.
    #[arg(long)]
    features: PathBuf,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    /// Concentration cap; `inf` for an uncapped link.
    #[arg(long, default_value_t = morphoscale::toytrain::DEFAULT_ALPHA_MAX)]
    alpha_max: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Trained head as JSON.
    #[arg(long)]
    out: PathBuf,
    /// Loss trace CSV; stdout when absent.
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

/// A problem with the invocation itself rather than the data.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    if !cli.quiet {
        eprintln!(
            "config: {}",
            serde_json::to_string(&cli.command).expect("arguments serialize")
        );
    }
    match commands::run(cli.command, cli.quiet) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

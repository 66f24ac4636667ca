//! `nestor`: tree-based network inference with missing actors from counts.

mod commands;
mod io;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Core(#[from] nestor::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn from_csv(e: csv::Error) -> Self {
        CliError::Io(std::io::Error::other(e.to_string()))
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numerical() || matches!(e, nestor::Error::Selection(_)) => 3,
            CliError::Io(_) => 1,
            _ => 2,
        }
    }
}

/// Outcome of a command that wrote its results.
pub enum Status {
    Done,
    /// Results were written but the retained run did not converge.
    NotConverged,
}

#[derive(Parser, Debug)]
#[command(name = "nestor", version, about = "Tree-based network inference with missing actors from count data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a network with r missing actors.
    Fit(FitArgs),
    /// Choose r by cross-validated pairwise composite likelihood.
    Select(SelectArgs),
    /// Write simulated replicates.
    Simulate(SimulateArgs),
    /// Simulate, infer and score replicates.
    Benchmark(BenchmarkArgs),
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Sites × species integer counts with a header of species names.
    #[arg(long)]
    pub counts: PathBuf,
    /// Covariates aligned by row; an intercept is added unless --no-intercept.
    #[arg(long)]
    pub covariates: Option<PathBuf>,
    /// Offsets with the same shape as the counts.
    #[arg(long)]
    pub offsets: Option<PathBuf>,
    #[arg(long)]
    pub no_intercept: bool,
}

#[derive(Args, Debug, Clone)]
pub struct VemArgs {
    /// Tempering parameter in (0, 1], or `auto`.
    #[arg(long, default_value = "0.1")]
    pub alpha: String,
    #[arg(long, default_value_t = 1e-3)]
    pub eps: f64,
    #[arg(long, default_value_t = 100)]
    pub max_iter: usize,
    /// Variational tree weight rule: standard or mean-field.
    #[arg(long, default_value = "standard")]
    pub rule: String,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub vem: VemArgs,
    /// Number of missing actors (default 1, or the number of cliques in --cliques).
    #[arg(long)]
    pub r: Option<usize>,
    /// Initial cliques, one per line as comma-separated species names.
    #[arg(long)]
    pub cliques: Option<PathBuf>,
    /// Add candidate cliques from this many sPCA runs on subsamples.
    #[arg(long)]
    pub resample: Option<usize>,
    /// sPCA cardinality (default max(3, ceil(p/3))).
    #[arg(long)]
    pub cardinality: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SelectArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub vem: VemArgs,
    /// Comma-separated candidate values of r.
    #[arg(long, default_value = "0,1,2,3", value_delimiter = ',')]
    pub r_grid: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    /// Trees drawn per fold.
    #[arg(long, default_value_t = 100)]
    pub trees: usize,
    #[arg(long)]
    pub cardinality: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Observed species (one more node is simulated and withheld).
    #[arg(long, default_value_t = 14)]
    pub p: usize,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchmarkArgs {
    /// blind or oracle.
    #[arg(long, default_value = "blind")]
    pub mode: String,
    #[arg(long, default_value_t = 60)]
    pub reps: usize,
    #[arg(long, default_value_t = 14)]
    pub p: usize,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[command(flatten)]
    pub vem: VemArgs,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn init_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("NESTOR_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Input(format!("NESTOR_THREADS must be a positive integer, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Input(format!("cannot size the worker pool: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = init_threads().and_then(|_| match cli.command {
        Command::Fit(a) => commands::fit(&a),
        Command::Select(a) => commands::select(&a),
        Command::Simulate(a) => commands::simulate(&a),
        Command::Benchmark(a) => commands::benchmark(&a),
    });
    match res {
        Ok(Status::Done) => ExitCode::SUCCESS,
        Ok(Status::NotConverged) => {
            eprintln!("warning: the retained run did not converge; results were written");
            ExitCode::from(4)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

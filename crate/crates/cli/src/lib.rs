//! Command-line orchestration for optlab: meta-training, learning-rate
//! tuning, evaluation batteries, reports and analyses.
//!
//! Every command is also callable as a function so it can be driven from
//! tests without spawning the binary.

pub mod analyze;
pub mod config;
pub mod evaluate;
pub mod manifest;
pub mod report;
pub mod train;
pub mod tune;

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CHECKPOINT: i32 = 3;
pub const EXIT_DATA: i32 = 4;

/// Error carrying the process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.into(),
        }
    }

    pub fn checkpoint(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CHECKPOINT,
            message: message.into(),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INTERNAL,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<optlab::Error> for CliError {
    fn from(e: optlab::Error) -> Self {
        use optlab::Error as E;
        let code = match &e {
            E::Argument(_) => EXIT_USAGE,
            E::Checkpoint(_) => EXIT_CHECKPOINT,
            E::Data(_) => EXIT_DATA,
            _ => EXIT_INTERNAL,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::internal(format!("I/O error: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::internal(format!("JSON error: {e}"))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::internal(format!("CSV error: {e}"))
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "optlab",
    version,
    about = "Learned-optimizer lab: meta-training, baselines and benchmarks"
)]
pub struct Cli {
    /// Worker threads (overrides OPTLAB_JOBS; 1 forces the sequential path).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Meta-train a learned optimizer with persistent evolution strategies.
    MetaTrain(TrainArgs),
    /// Grid-search the learning rate of Adam or GD-M.
    Tune(tune::TuneArgs),
    /// Run solvers over a seeded problem battery and write trajectories.
    Evaluate(ConfigArgs),
    /// Aggregate trajectories into profiles and relative-iteration tables.
    Report(report::ReportArgs),
    /// Cosine similarity of steps to gradient and Newton directions on 2-d Rosenbrock.
    AnalyzeDirection(analyze::DirectionArgs),
    /// Median step time per dimension.
    BenchRuntime(analyze::RuntimeArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set meta.total_meta_steps=100`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Resume meta-training from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

/// Worker count from `--jobs`, then `OPTLAB_JOBS`, then the core count.
pub fn resolve_jobs(flag: Option<usize>) -> CliResult<usize> {
    if let Some(j) = flag {
        return if j == 0 {
            Err(CliError::usage("--jobs must be >= 1"))
        } else {
            Ok(j)
        };
    }
    match std::env::var("OPTLAB_JOBS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(j) if j > 0 => Ok(j),
            _ => Err(CliError::usage(format!(
                "OPTLAB_JOBS=`{v}` is not a positive integer"
            ))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

pub fn execute(cli: Cli) -> CliResult<()> {
    let jobs = resolve_jobs(cli.jobs)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::internal(format!("thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::MetaTrain(a) => train::cmd_meta_train(&a),
        Command::Tune(a) => tune::cmd_tune(&a),
        Command::Evaluate(a) => evaluate::cmd_evaluate(&a),
        Command::Report(a) => report::cmd_report(&a),
        Command::AnalyzeDirection(a) => analyze::cmd_analyze_direction(&a),
        Command::BenchRuntime(a) => analyze::cmd_bench_runtime(&a),
    })
}

/// Parses `args` (including the program name) and runs the command,
/// printing diagnostics to stderr. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

//! `evoforecast` command-line runner.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on configuration or usage errors.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "evoforecast", version, about = "Fixed-window forecasters rolled out block by block")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Top-level seed; overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its checkpoint and history.
    Train(RunArgs),
    /// Roll a checkpoint forward from the last `T` rows of a CSV.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Forecast horizon.
        #[arg(long)]
        horizon: usize,
        /// Column of opaque timestamps to ignore.
        #[arg(long)]
        timestamp_column: Option<String>,
        /// Standardization stats written by `train`; predictions are mapped back to raw units.
        #[arg(long)]
        stats: Option<PathBuf>,
        /// Also write the rollout trace.
        #[arg(long)]
        trace: bool,
        #[arg(long, default_value = ".")]
        output: PathBuf,
    },
    /// Train one model per (T, L) and score every (H, mode) cell.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Evaluation stride; overrides `eval.stride`.
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Train while recording per-segment gradient statistics.
    Grad(RunArgs),
    /// Win ratios between paradigms over one or more report CSVs.
    Report {
        /// Report CSVs written by `sweep`.
        #[arg(long = "reports", required = true, num_args = 1..)]
        reports: Vec<PathBuf>,
        /// JSON list of comparisons.
        #[arg(long)]
        comparisons: PathBuf,
        #[arg(long, default_value = ".")]
        output: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => commands::train(&a.config, a.output, a.seed),
        Command::Predict {
            checkpoint,
            input,
            horizon,
            timestamp_column,
            stats,
            trace,
            output,
        } => commands::predict(commands::PredictArgs {
            checkpoint,
            input,
            horizon,
            timestamp_column,
            stats,
            trace,
            output,
        }),
        Command::Sweep { run, stride } => commands::sweep(&run.config, run.output, run.seed, stride),
        Command::Grad(a) => commands::grad(&a.config, a.output, a.seed),
        Command::Report {
            reports,
            comparisons,
            output,
        } => commands::report(&reports, &comparisons, &output),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}

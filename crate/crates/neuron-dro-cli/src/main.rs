//! Command-line front end for robust single-neuron training: sample
//! datasets, train with full instrumentation, self-verify the numerics, and
//! turn traces into reports.
//!
//! Exit codes: 0 on success, 1 when verification or the run itself fails,
//! 2 for unusable configuration, 3 for unusable data.

mod chart;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::OutputFormat;

/// What went wrong, carrying the process exit code.
#[derive(Debug)]
pub enum Failure {
    /// The run or verification itself failed (exit 1).
    Runtime(String),
    /// The configuration — file, flags, or environment — is unusable (exit 2).
    Config(String),
    /// The dataset or trace input is unusable (exit 3).
    Data(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Runtime(_) => 1,
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Runtime(m) | Failure::Config(m) | Failure::Data(m) => m,
        }
    }
}

/// Route a library error to the exit-code contract: bad parameters are
/// configuration errors, bad inputs are data errors, and numerical
/// breakdowns inside a run are runtime failures.
pub fn classify(e: neuron_dro::Error) -> Failure {
    use neuron_dro::Error as E;
    match &e {
        E::InvalidParameter { .. } | E::Json(_) | E::Generation { .. } => {
            Failure::Config(e.to_string())
        }
        E::Data { .. }
        | E::Csv(_)
        | E::Io(_)
        | E::DimensionMismatch { .. }
        | E::NonFinite { .. }
        | E::Untruncated => Failure::Data(e.to_string()),
        _ => Failure::Runtime(e.to_string()),
    }
}

#[derive(Parser)]
#[command(
    name = "neuron-dro",
    version,
    about = "Distributionally robust single-neuron training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a dataset from the config's generator; writes dataset.csv and
    /// metadata.json (seed, planted model, measured covariate bound).
    Generate {
        /// Experiment config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the generator seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on a dataset CSV; writes w_hat.json, p_hat.json, trace.csv,
    /// and diagnostics.json when planted-model metadata is present.
    Train {
        /// Experiment config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Dataset CSV; metadata.json is read from the same directory.
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory; defaults to the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the sampling seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the self-verification suites; exits 0 only if every suite passes.
    Verify {
        /// Shifts the random instance stream of the randomized suites.
        #[arg(long)]
        seed: Option<u64>,
        /// Harness self-test: bias every measured deviation so each suite
        /// must go red.
        #[arg(long, hide = true)]
        inject_perturbation: bool,
    },
    /// Summarize a training trace into a convergence table and an optional
    /// chart.
    Report {
        /// Trace CSV produced by `train`.
        #[arg(long)]
        trace: PathBuf,
        /// Output directory; defaults to the trace's directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Extra output formats (repeatable); the CSV table is always
        /// written, `svg` adds a line chart.
        #[arg(long = "format", value_enum)]
        formats: Vec<OutputFormat>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { config, out, seed } => {
            commands::generate(&config, out.as_deref(), seed)
        }
        Command::Train {
            config,
            dataset,
            out,
            seed,
        } => commands::train(&config, &dataset, out.as_deref(), seed),
        Command::Verify {
            seed,
            inject_perturbation,
        } => commands::verify(seed, inject_perturbation),
        Command::Report { trace, out, formats } => {
            commands::report(&trace, out.as_deref(), &formats)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message());
            ExitCode::from(failure.exit_code())
        }
    }
}

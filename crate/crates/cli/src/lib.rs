//! Experiment runner: dataset generation, training, evaluation, grid search,
//! timing and result tables, driven by one TOML config file.
//!
//! Output layout under the output directory:
//!
//! ```text
//! data/{train,validation,test}.csv, manifest.toml
//! <method>/checkpoint.bin, metrics.csv, eval.csv, per_step.csv
//! repeat-<r>/...            one of the above per pipeline repeat
//! table.csv, table.txt
//! ```

pub mod commands;
pub mod config;
pub mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input: configuration, paths, missing files, mismatched runs.
    #[error("{0}")]
    User(String),
    /// The computation itself failed: divergence or filter degeneracy.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::User(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::User(e.to_string())
    }
}

impl From<rlpf::data::DataError> for CliError {
    fn from(e: rlpf::data::DataError) -> Self {
        CliError::User(e.to_string())
    }
}

impl From<rlpf::checkpoint::CheckpointError> for CliError {
    fn from(e: rlpf::checkpoint::CheckpointError) -> Self {
        CliError::User(e.to_string())
    }
}

impl From<rlpf::training::TrainError> for CliError {
    fn from(e: rlpf::training::TrainError) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::User(e.to_string())
        }
    }
}

impl From<rlpf::filter::FilterError> for CliError {
    fn from(e: rlpf::filter::FilterError) -> Self {
        rlpf::training::TrainError::from(e).into()
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::User(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "rlpf", version, about = "Regime learning particle filter experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub overrides: Overrides,
}

/// Flags that override the config file.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// TOML config file; defaults are used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for repeats and grid cells.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    #[arg(long, global = true)]
    pub method: Option<String>,
    /// markov or polya.
    #[arg(long, global = true)]
    pub experiment: Option<String>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Simulate the dataset and write its splits and manifest.
    Generate,
    /// Train the configured method on the generated dataset.
    Train,
    /// Evaluate a trained method (or the oracle filter) on the test split.
    Eval,
    /// Grid-search the training hyperparameters and keep the best cell.
    Grid,
    /// Time one training epoch and one test run.
    Bench,
    /// Summarise evaluated runs as mean ± standard deviation per method.
    Table {
        /// Methods in table order; defaults to the config's list.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
    },
    /// generate, train and eval for every repeat and method, then table.
    Pipeline,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let config = commands::load_config(&cli.overrides)?;
    match cli.command {
        Command::Generate => commands::generate(&config).map(|_| ()),
        Command::Train => commands::train(&config).map(|_| ()),
        Command::Eval => commands::eval(&config).map(|_| ()),
        Command::Grid => commands::grid(&config).map(|_| ()),
        Command::Bench => commands::bench(&config).map(|_| ()),
        Command::Table { methods } => {
            let methods = if methods.is_empty() {
                config.pipeline_methods()?
            } else {
                methods
                    .iter()
                    .map(|m| m.parse().map_err(|e: rlpf::methods::UnknownMethod| CliError::User(e.to_string())))
                    .collect::<Result<_, _>>()?
            };
            let t = table::collect(&config.output, &methods)?;
            table::write(&config.output, &t)?;
            print!("{}", table::render_text(&t));
            Ok(())
        }
        Command::Pipeline => commands::pipeline(&config),
    }
}

/// Parses the process arguments, runs, and maps errors to exit codes.
pub fn main_with_args(args: impl IntoIterator<Item = std::ffi::OsString>) -> ExitCode {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

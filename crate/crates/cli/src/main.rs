//! `cmkd` command-line tool.
//!
//! Exit codes: 0 success, 1 other failure, 2 usage error, 3 unknown setting,
//! 4 malformed configuration, 5 missing input file, 6 training failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(
        "unknown setting `{0}` (expected one of individual, joint, joint-kd, y, x, chilopod, ours)"
    )]
    UnknownSetting(String),
    #[error("malformed configuration: {0}")]
    Config(String),
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("training failed: {0}")]
    Training(cmkd::Error),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::UnknownSetting(_) => 3,
            CliError::Config(_) => 4,
            CliError::MissingFile(_) => 5,
            CliError::Training(_) => 6,
        }
    }
}

impl From<cmkd::Error> for CliError {
    fn from(e: cmkd::Error) -> Self {
        match e {
            cmkd::Error::Io(io) => CliError::Other(io.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "cmkd",
    version,
    about = "Unpaired two-modality segmentation with shared kernels and distillation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one setting.
    Train {
        #[arg(long)]
        setting: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Dataset root overriding the config.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a split of both modalities.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Train and evaluate all seven settings over several seeds.
    CompareSettings {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Train the distillation setting for a range of weights `start:stop:step`.
    SweepAlpha {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        values: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Export the validation distillation curve and confusion evolution.
    ExportCurves {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { config, out } => commands::gen_data(config.as_deref(), &out),
        Command::Train {
            setting,
            config,
            seed,
            out,
            dataset,
        } => commands::train(&setting, &config, seed, &out, dataset.as_deref()),
        Command::Eval {
            checkpoint,
            split,
            out,
            dataset,
        } => commands::eval(&checkpoint, &split, &out, dataset.as_deref()),
        Command::CompareSettings {
            config,
            seeds,
            out,
            dataset,
        } => commands::compare_settings(&config, &seeds, &out, dataset.as_deref()),
        Command::SweepAlpha {
            config,
            values,
            seed,
            out,
            dataset,
        } => commands::sweep_alpha(&config, &values, seed, &out, dataset.as_deref()),
        Command::ExportCurves { log, out } => commands::export_curves(&log, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

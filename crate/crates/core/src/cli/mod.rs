//! The `ssc` command line: dataset generation, training, evaluation,
//! gradient checks and prediction export.
//!
//! Exit codes are 0 on success, 1 for usage errors, 2 for input or IO
//! failures and 3 for numeric failures. `HD2_LOG` (`quiet`, `info` or
//! `debug`) sets stderr verbosity.

mod commands;
mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub use manifest::RunManifest;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "ssc", version, about = "Camera-based semantic scene completion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
    },
    /// Train a model and write a checkpoint plus loss and metric CSVs.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train once per listed expanded dimension and write sweep.csv.
        #[arg(long, value_delimiter = ',')]
        sweep_d_exp: Option<Vec<usize>>,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Score the ground truth against itself.
        #[arg(long)]
        oracle: bool,
    },
    /// Compare analytic gradients of every loss with finite differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, hide = true)]
        corrupt_grad: bool,
    },
    /// Write per-sample predictions.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        format: ExportFormat,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ExportFormat {
    Sscv,
    Ply,
}

fn init_logging() {
    let level = match std::env::var("HD2_LOG").as_deref() {
        Ok("quiet") => log::LevelFilter::Error,
        Ok("info") => log::LevelFilter::Info,
        Ok("debug") => log::LevelFilter::Debug,
        _ => log::LevelFilter::Warn,
    };
    let _ = env_logger::Builder::new().filter_level(level).target(env_logger::Target::Stderr).try_init();
}

/// Maps a library error to its exit code.
pub fn exit_code(e: &crate::Error) -> i32 {
    use crate::Error::*;
    match e {
        Config(_) => EXIT_USAGE,
        Domain(_) | Diverged { .. } => EXIT_NUMERIC,
        Shape(_) | Format(_) | Length { .. } | Data(_) | Checkpoint(_) | Io { .. } => EXIT_INPUT,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match commands::dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

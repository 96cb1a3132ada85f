//! Command-line surface.
//!
//! Every command writes into `--out`, appending its entry to `run.json`
//! before doing any work and finalizing it afterwards, also on failure.
//! Exit codes: 0 success, 1 usage or config error, 2 data or format error,
//! 3 numerical failure.

mod commands;
pub mod config;
pub mod manifest;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::netspec::NetSpecError;
use crate::pipeline::PipelineError;
use crate::specialty::SpecialtyError;

pub use config::{ConfigError, DataSource, ExperimentConfig, SpecSource};
pub use manifest::{content_hash, RunManifest, RunStatus, MANIFEST_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    NetSpec {
        path: String,
        #[source]
        source: NetSpecError,
    },
    /// A malformed matrix or mapping file.
    #[error("{path}: {source}")]
    Input {
        path: String,
        #[source]
        source: SpecialtyError,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::NetSpec { .. } => EXIT_USAGE,
            CliError::Input { .. } | CliError::Io { .. } => EXIT_DATA,
            CliError::GradCheck(_) => EXIT_NUMERIC,
            CliError::Pipeline(e) => match e {
                PipelineError::Data(_) => EXIT_DATA,
                PipelineError::NonFinite { .. } => EXIT_NUMERIC,
                PipelineError::NetSpec(_)
                | PipelineError::Specialty(_)
                | PipelineError::Tensor(_)
                | PipelineError::Config(_) => EXIT_USAGE,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "nofe", version, about = "Network-of-Experts training pipeline")]
pub struct Cli {
    /// Experiment config file (key = value lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Fixed-order reductions and synchronous augmentation.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Output directory; receives run.json and every artifact.
    #[arg(long, global = true, default_value = "nofe-out")]
    pub out: PathBuf,
    /// Number of specialties.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// elasso balance weight.
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    /// Specialty method.
    #[arg(long, global = true)]
    pub method: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Partition classes offline from a confusion matrix CSV.
    Partition {
        #[arg(long)]
        matrix: PathBuf,
    },
    /// Parameter counts of a netspec, and of its tree when --k is given.
    CountParams {
        /// Path, or shipped:<name>.
        #[arg(long)]
        netspec: String,
        /// Branch template; defaults to the shipped one for shipped nets.
        #[arg(long)]
        branch: Option<String>,
    },
    /// Finite-difference gradient check of every layer kind.
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
    /// Write the configured dataset as train.nofd and test.nofd.
    Synth,
    /// Train the generalist and learn the specialties.
    TrainGeneralist,
    /// Train the base network on all classes, as a baseline.
    TrainFlat,
    /// Assemble the tree from the trained generalist.
    BuildNofe,
    /// Fine-tune the tree end to end.
    Finetune,
    /// Top-1 accuracy of the fine-tuned tree on the test split.
    Eval,
    /// Nearest-neighbor retrieval of test images among training images.
    Retrieve,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Partition { .. } => "partition",
            Command::CountParams { .. } => "count-params",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Synth => "synth",
            Command::TrainGeneralist => "train-generalist",
            Command::TrainFlat => "train-flat",
            Command::BuildNofe => "build-nofe",
            Command::Finetune => "finetune",
            Command::Eval => "eval",
            Command::Retrieve => "retrieve",
        }
    }
}

/// Caps the worker pool from `NOFE_THREADS`, if set.
fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("NOFE_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("NOFE_THREADS must be a positive integer, got '{value}'")))?;
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs one command; the manifest is finalized whatever the outcome.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    configure_threads()?;
    std::fs::create_dir_all(&cli.out).map_err(|e| CliError::io(&cli.out, e))?;
    let mut writer = manifest::ManifestWriter::begin(&cli.out, cli.command.name())?;
    let result = commands::dispatch(cli, &mut writer);
    writer.finish(&result)?;
    result
}

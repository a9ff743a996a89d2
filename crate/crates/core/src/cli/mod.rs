//! Command-line driver: data generation, training, comparison, export,
//! gradient checking and the one-shot `reproduce` pipeline.

mod commands;
pub mod config;
pub mod gradcheck;
pub mod selection;

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::Error;

pub use commands::{
    cmd_compare, cmd_export, cmd_gen_data, cmd_grad_check, cmd_reproduce, cmd_train, report_stem,
};
pub use config::{Levels, RunConfig, CONFIG_HELP};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "STRESS_BD_OUT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_VALIDATION: i32 = 5;

#[derive(Debug, Parser)]
#[command(
    name = "stress-bd",
    version,
    about = "Parameter-to-stress-image generation with boundary-decoder networks",
    after_help = CONFIG_HELP,
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the full-factorial surrogate dataset.
    GenData(GenDataArgs),
    /// Train one variant and write its report and weight checkpoints.
    Train(TrainArgs),
    /// Aggregate training reports into comparison and scatter tables.
    Compare(CompareArgs),
    /// Write ground-truth and predicted images for selected cases.
    Export(ExportArgs),
    /// Check analytic gradients of every loss path against finite differences.
    GradCheck(GradCheckArgs),
    /// gen-data, then train every variant for several seeds, then compare.
    Reproduce(ReproduceArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Dataset file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Seed for the train/test split.
    #[arg(long)]
    pub seed: u64,
    /// Levels per parameter, evenly spaced across each range (5 = default
    /// table), or a file whose [grid] section lists them.
    #[arg(long, value_name = "N|FILE")]
    pub levels: Option<Levels>,
    /// Config file; uses its [grid] and [dataset] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset file written by gen-data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// bd, ae_bd, dc_bd or ae_knn (overrides the config file).
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for weight init, batching and k-means.
    #[arg(long)]
    pub seed: u64,
    /// Output directory [default: $STRESS_BD_OUT].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override total iterations.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Override checkpoint iterations, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub checkpoints: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Report files written by train.
    #[arg(long, num_args = 1..)]
    pub reports: Vec<PathBuf>,
    /// Output directory [default: $STRESS_BD_OUT].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Weight checkpoint files written by train.
    #[arg(long, num_args = 1.., required = true)]
    pub weights: Vec<PathBuf>,
    /// Case ids (`3,17`) or filters (`layer=overmold,die>=1.5,split=test`).
    #[arg(long)]
    pub cases: String,
    /// Export at most this many of the selected cases.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Output directory [default: $STRESS_BD_OUT].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// First seed; seeds seed..seed+count are checked.
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    /// Perturb one analytic gradient entry; the check must then fail.
    #[arg(long)]
    pub corrupt: bool,
}

#[derive(Debug, Args)]
pub struct ReproduceArgs {
    /// Base seed: dataset split uses it, runs use seed, seed+1, ...
    #[arg(long)]
    pub seed: u64,
    /// Output directory [default: $STRESS_BD_OUT].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Runs per variant.
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
    /// Concurrent training runs.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Override total iterations (checkpoints are rescaled to fifths).
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Levels per DOE parameter, or a file with a [grid] section.
    #[arg(long, value_name = "N|FILE")]
    pub levels: Option<Levels>,
}

/// Error plus the exit code it maps to.
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

    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::OutOfRange(..) => EXIT_CONFIG,
            Error::Io { .. } => EXIT_IO,
            _ => EXIT_VALIDATION,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Compare(a) => cmd_compare(&a, out),
        Command::Export(a) => cmd_export(&a, out),
        Command::GradCheck(a) => cmd_grad_check(&a, out),
        Command::Reproduce(a) => cmd_reproduce(&a, out),
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Diagnostics go to `err`.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = e.render();
            let _ = if code == EXIT_OK {
                write!(out, "{rendered}")
            } else {
                write!(err, "{rendered}")
            };
            return code;
        }
    };
    match run(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}

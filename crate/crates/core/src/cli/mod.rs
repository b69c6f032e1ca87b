//! Command-line entry points. Exit status is 0 on success, 2 on usage or
//! configuration errors and 1 on runtime failures.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use self::config::{ModelPreset, RunConfig};
use crate::error::Error;

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidArgument(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

pub type CliResult<T = ()> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "bonet", version, about = "Two-stream bone age regression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic disk dataset with train/val/test splits.
    Synth(SynthArgs),
    /// Train a model and report on the validation split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Evaluate(EvaluateArgs),
    /// Predict the bone age of one image.
    Predict(PredictArgs),
    /// Write a Grad-CAM overlay for one image.
    Gradcam(GradcamArgs),
    /// Train and evaluate the four module on/off variants.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Total number of samples over all splits.
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0.0)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 500)]
    pub image_size: usize,
    /// Write into a non-empty directory.
    #[arg(long)]
    pub force: bool,
    /// Also write the age histogram as a PNG.
    #[arg(long)]
    pub plot: bool,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root; overrides `data.root`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Override one config value, e.g. `--set train.epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from `<out>/last.ckpt`.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Comma-separated cumulative-accuracy thresholds in months.
    #[arg(long, default_value = "6,12")]
    pub thresholds: String,
    /// Report directory; defaults to `eval_<split>` next to the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run config for preprocessing; defaults to `config.json` next to the
    /// checkpoint when present.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ImageArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// JSON with `bbox` and `keypoints`, or a map of such objects keyed by
    /// image id.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Run config for preprocessing; defaults to `config.json` next to the
    /// checkpoint when present.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub input: ImageArgs,
    /// 0 = female, 1 = male.
    #[arg(long)]
    pub gender: i64,
}

#[derive(Debug, Args)]
pub struct GradcamArgs {
    #[command(flatten)]
    pub input: ImageArgs,
    #[arg(long, default_value_t = 0)]
    pub gender: i64,
    /// pre_transformer, post_transformer, pre_rfaconv or post_rfaconv.
    #[arg(long)]
    pub tap: String,
    /// Overlay PNG; the raw heatmap goes next to it with a `.pfm` extension.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

//! `lsda`: generate phantom datasets, train, evaluate and inspect hard examples.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "lsda", version, about = "Latent-space hard-example training for segmentation")]
pub struct Cli {
    /// key = value file supplying defaults for unset flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a phantom dataset.
    GenData(GenDataArgs),
    /// Train both networks.
    Train(TrainArgs),
    /// Score checkpoints on one or more datasets.
    Eval(EvalArgs),
    /// Dump masks, masked codes and decoded hard examples for one sample.
    MaskDemo(MaskDemoArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// bias | ghost | motion | spike
    #[arg(long)]
    pub corrupt: Option<String>,
    /// Fixed severity in [0,1]; drawn per sample from {0.3, 0.5, 0.8} if omitted.
    #[arg(long, requires = "corrupt")]
    pub severity: Option<f32>,
    /// Use the shifted intensity/noise generator.
    #[arg(long)]
    pub shifted: bool,
    /// train | val | test (ignored with --corrupt).
    #[arg(long)]
    pub split: Option<String>,
    /// Image height and width.
    #[arg(long)]
    pub size: Option<usize>,
    /// Index of the first sample.
    #[arg(long)]
    pub first_index: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// standard | cooperative
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Validation dataset for best-checkpoint selection.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Continue from the state saved in --out.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Comma-separated dataset directories.
    #[arg(long, value_delimiter = ',', required = true)]
    pub data: Vec<PathBuf>,
    /// ftn | ftn+stn
    #[arg(long)]
    pub stage: Option<String>,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub plot: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MaskDemoArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// dropout | channel | spatial
    #[arg(long)]
    pub scheme: String,
    #[arg(long)]
    pub p: f64,
    #[arg(long)]
    pub a: f32,
    #[arg(long)]
    pub out: PathBuf,
    /// Sample to use.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Seed for the dropout draw.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    NonFinite(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io(_) => 2,
            CliError::NonFinite(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Io(m) => write!(f, "I/O or format error: {m}"),
            CliError::NonFinite(m) => write!(f, "numeric abort: {m}"),
        }
    }
}

impl From<lsda_core::Error> for CliError {
    fn from(e: lsda_core::Error) -> Self {
        use lsda_core::Error as E;
        match e {
            E::Io(_) | E::Json(_) | E::Format { .. } | E::Checksum { .. } => CliError::Io(e.to_string()),
            E::NonFinite(_) => CliError::NonFinite(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lsda: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

//! `shapelock` command-line pipeline: phantoms → crop → CycleGAN → U-Net → report.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Overrides, PipelineConfig, Scale};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_TRAINING: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

impl From<shapelock::Error> for CliError {
    fn from(e: shapelock::Error) -> Self {
        use shapelock::Error as E;
        let code = match e {
            E::InvalidParameter { .. } | E::Spec(_) => EXIT_CONFIG,
            E::TrainingFailure(_) => EXIT_TRAINING,
            _ => EXIT_DATA,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::data(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "shapelock",
    version,
    about = "Shape-preserving lung pathology synthesis and segmentation"
)]
struct Cli {
    /// TOML config; sections phantom, crop, cyclegan, segmentation, evaluation.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root (overrides the config file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Continue training from the checkpoint in the output directory.
    #[arg(long, global = true)]
    resume: bool,
    /// Model and image size preset.
    #[arg(long, global = true, value_enum)]
    scale: Option<Scale>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate healthy and pathological phantom datasets.
    PhantomGen,
    /// Crop slices to the rib cage and resize them to the network input size.
    Crop {
        /// Input manifests (default: both generated phantom datasets).
        #[arg(long)]
        input: Vec<PathBuf>,
    },
    /// Train the healthy → pathological CycleGAN.
    TrainCyclegan {
        /// Cropped healthy manifest (with lung masks).
        #[arg(long)]
        healthy: Option<PathBuf>,
        /// Cropped pathological manifest (masks unused).
        #[arg(long)]
        pathological: Option<PathBuf>,
        /// Stop after this many epochs in this run (the checkpoint allows resuming).
        #[arg(long)]
        halt_after: Option<usize>,
    },
    /// Render input | generated | difference panels for a directory of slices.
    Translate {
        /// CycleGAN checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory with a manifest.json or plain 16-bit HU PNGs.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Train the U-Net segmenter, optionally with CycleGAN augmentation.
    TrainUnet {
        /// Cropped healthy manifest; train and val splits are used.
        #[arg(long)]
        train: Option<PathBuf>,
        /// CycleGAN checkpoint enabling augmentation.
        #[arg(long)]
        generator: Option<PathBuf>,
        /// Output subdirectory and model name.
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        halt_after: Option<usize>,
    },
    /// Per-patient Dice of one or more U-Nets on one or more datasets.
    Evaluate {
        /// `name=checkpoint`, repeatable.
        #[arg(long = "model")]
        models: Vec<String>,
        /// `name=manifest`, repeatable.
        #[arg(long = "dataset")]
        datasets: Vec<String>,
    },
    /// Merge evaluation results into a markdown table.
    Report {
        /// `report.json` files written by `evaluate`.
        #[arg(long)]
        input: Vec<PathBuf>,
    },
}

fn configure_workers() -> Result<(), CliError> {
    let Ok(v) = std::env::var("SHAPELOCK_NUM_WORKERS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::config(format!("SHAPELOCK_NUM_WORKERS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::config(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_workers()?;
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out,
        scale: cli.scale,
    };
    let cfg = PipelineConfig::resolve(cli.config.as_deref(), &overrides)?;
    commands::dispatch(&cfg, cli.command, cli.resume)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = match e.code {
                EXIT_CONFIG => "config error",
                EXIT_TRAINING => "training failure",
                _ => "data error",
            };
            eprintln!("{kind}: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

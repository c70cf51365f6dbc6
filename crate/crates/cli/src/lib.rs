//! Command-line orchestration of the segmentation pipeline.

pub mod commands;
pub mod config;
pub mod error;
pub mod heatmap;
pub mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::PipelineConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "diffseg", version, about = "Lesion segmentation from conditional diffusion noise differences")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Pipeline config (TOML). Omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory for all artifacts.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        val: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
    },
    /// Train the conditional denoiser on a dataset's train split.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Single-timestep mask for one image.
    Segment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        timestep: Option<usize>,
        /// Fixed threshold δ; implies the fixed rule.
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Multi-timestep mask ensemble for one image or a dataset's test split.
    Ensemble {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, conflicts_with = "data", required_unless_present = "data")]
        image: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// `start:stop:step` or a comma list.
        #[arg(long)]
        timesteps: Option<String>,
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Coherence, ambiguity and GED of an ensemble run.
    Uncertainty {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ensemble: PathBuf,
    },
    /// CRF refinement of an ensemble run.
    Refine {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ensemble: PathBuf,
        #[arg(long, conflicts_with = "data", required_unless_present = "data")]
        image: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        subset: Option<usize>,
    },
    /// CRF refinement of a single mask against its image.
    RefineOne {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Lesion probability assigned inside the mask (1 − this outside).
        #[arg(long, default_value_t = 0.7)]
        confidence: f64,
    },
    /// Metrics of predicted masks against a dataset's test masks.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Run directory holding `<id>/<mask-name>`.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, default_value = "final.png")]
        mask_name: String,
        /// Score every `mask_tNNN.png` of each image and average per image.
        #[arg(long)]
        members: bool,
    },
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::Synth { common, .. }
            | Command::Train { common, .. }
            | Command::Segment { common, .. }
            | Command::Ensemble { common, .. }
            | Command::Uncertainty { common, .. }
            | Command::Refine { common, .. }
            | Command::RefineOne { common, .. }
            | Command::Eval { common, .. } => common,
        }
    }
}

/// Runs a parsed command; returns the manifest path.
pub fn run(cli: Cli) -> Result<PathBuf, CliError> {
    commands::dispatch(cli.command)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_args<I, T>(args: I) -> Result<PathBuf, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage(e.to_string().trim().to_string()))?;
    run(cli)
}

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use damd_core::network::Variant;

#[derive(Debug, Parser)]
#[command(name = "damd", version, about = "3DMM face alignment with a densely connected attention network")]
pub struct Cli {
    /// Root seed; every random stream is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Morphable model file.
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Network weights file.
    #[arg(long, global = true)]
    pub weights: Option<PathBuf>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic morphable model file.
    GenModel {
        #[arg(long, default_value_t = 1200)]
        vertices: usize,
    },
    /// Render a dataset of virtual faces (PPM images plus annotations.jsonl).
    GenData {
        #[arg(long, default_value_t = 64)]
        count: usize,
    },
    /// Train a regressor; writes weights and a per-step loss CSV.
    Train(TrainArgs),
    /// Predict landmarks for annotated images.
    Fit {
        /// JSONL with image_path and bbox per line.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        net: NetArgs,
        /// Directory for mesh and landmark renders.
        #[arg(long)]
        render: Option<PathBuf>,
    },
    /// Score predictions against annotations.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Parameter and FLOP table of the regressors and baselines.
    Analyze {
        #[arg(long, default_value_t = 1.0)]
        width: f64,
        #[arg(long, default_value_t = 120)]
        input_size: usize,
    },
    /// Render the mean-texture mesh, from annotations or a single pose.
    Render {
        /// Render every annotated face over its image.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        yaw: f64,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        pitch: f64,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        roll: f64,
        #[arg(long, default_value_t = 120)]
        size: usize,
    },
    /// Face profiling: rotate annotated faces in yaw and re-render them.
    Augment {
        #[arg(long)]
        data: PathBuf,
        /// Largest extra yaw in degrees.
        #[arg(long, default_value_t = 30.0)]
        max_delta: f64,
    },
}

#[derive(Debug, Clone, Args)]
pub struct NetArgs {
    #[arg(long, default_value = "damd")]
    pub variant: Variant,
    #[arg(long, default_value_t = 0.125)]
    pub width: f64,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Annotations with params for every line.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub net: NetArgs,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    /// Decay steps; defaults to epochs 15, 25, 30 of 40 rescaled to --steps.
    #[arg(long, value_delimiter = ',')]
    pub milestones: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0.2)]
    pub lr_factor: f64,
    #[arg(long, default_value_t = 0.5)]
    pub lambda1: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda2: f64,
    #[arg(long, default_value_t = 10.0)]
    pub omega: f64,
    #[arg(long, default_value_t = 2.0)]
    pub epsilon: f64,
}

/// Failure classes with their exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(anyhow::Error),
    Numeric(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }
}

impl From<damd_core::Error> for Failure {
    fn from(e: damd_core::Error) -> Self {
        match e {
            damd_core::Error::NonFinite(_) => Failure::Numeric(e.into()),
            other => Failure::Data(other.into()),
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage: {m}"),
            Failure::Data(e) => write!(f, "{e:#}"),
            Failure::Numeric(e) => write!(f, "numeric failure: {e:#}"),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("damd: {f}");
            ExitCode::from(f.code())
        }
    }
}

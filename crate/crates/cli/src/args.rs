//! Argument definitions for the `gatnerf` binary.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(name = "gatnerf", version, about = "Expression-conditioned dynamic radiance field engine")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct CommonOpts {
    /// Configuration preset: paper-scale or desk-scale dimensions.
    #[arg(long, default_value = "desk", global = true)]
    pub preset: String,
    /// JSON config file layered over the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted-key overrides layered last, e.g. --set train.lr=1e-4
    #[arg(long = "set", global = true)]
    pub set: Vec<String>,
    /// Seed override (shorthand for --set train.seed=... synth.seed=...).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (GATNERF_THREADS as fallback; default 1).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dynamic-scene dataset.
    Synth {
        #[command(flatten)]
        common: CommonOpts,
        /// Output dataset directory.
        #[arg(short, long)]
        out: PathBuf,
        /// Number of frames.
        #[arg(long)]
        frames: Option<usize>,
        /// Square image size in pixels.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train the coarse/fine networks and latent codes.
    Train {
        #[command(flatten)]
        common: CommonOpts,
        /// Dataset directory.
        data: PathBuf,
        /// Output directory for checkpoints and the metric log.
        #[arg(short, long)]
        out: PathBuf,
        /// Iteration count override.
        #[arg(long)]
        iters: Option<u64>,
        /// Ablation: replace the transformer block with a bare projection.
        #[arg(long)]
        no_gat: bool,
        /// Ablation: freeze latent codes at zero and drop the regularizer.
        #[arg(long)]
        no_latent: bool,
        /// Resume from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Periodic checkpoint cadence in iterations (0 = final only).
        #[arg(long, default_value_t = 1000)]
        checkpoint_every: u64,
    },
    /// Render frames from a trained checkpoint.
    Render {
        #[command(flatten)]
        common: CommonOpts,
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Explicit frame indices (comma-separated).
        #[arg(long, value_delimiter = ',')]
        frames: Option<Vec<usize>>,
        /// Frame selection when --frames is absent: train|test|all.
        #[arg(long, default_value = "all")]
        split: String,
        /// Drive every render with this frame's expression (novel expression).
        #[arg(long)]
        novel_expression_frame: Option<usize>,
        /// Render every frame from this frame's camera (novel pose).
        #[arg(long)]
        novel_pose_frame: Option<usize>,
        /// Sparse expression edits "i=v,j=v" applied after selection.
        #[arg(long)]
        delta_set: Option<String>,
        /// Latent code source: trained|mean|zero.
        #[arg(long, default_value = "trained")]
        gamma: String,
    },
    /// Drive a trained model with another dataset's expression sequence.
    Reenact {
        #[command(flatten)]
        common: CommonOpts,
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset providing the driving expression trajectory.
        #[arg(long)]
        driver: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Pin the camera to one dataset frame.
        #[arg(long)]
        camera_frame: Option<usize>,
    },
    /// Render the test split and report L1/PSNR/SSIM (full and cropped).
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        frames: Option<Vec<usize>>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Additional checkpoints for an ablation comparison table.
        #[arg(long, value_delimiter = ',')]
        compare: Vec<PathBuf>,
    },
    /// Run the finite-difference gradient verification suite.
    Gradcheck {
        #[command(flatten)]
        common: CommonOpts,
    },
}

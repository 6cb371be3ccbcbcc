//! Command-line harness: data generation, both training stages, sampling,
//! mask generation, evaluation, sweeps, ablations and plots.

pub mod commands;
pub mod config;
pub mod plot;
pub mod stages;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "mmgt", version, about = "Two-stage co-speech gesture video generation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Run configuration (JSON); defaults are used for missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Compute device; only `cpu` is available.
    #[arg(long, global = true, default_value = "cpu")]
    pub device: String,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate (or reuse) the synthetic corpus.
    GenData,
    /// Train the audio-to-pose stage.
    TrainSmga {
        #[arg(long)]
        resume: bool,
    },
    /// Sample a pose sequence from audio and an initial pose.
    SampleSmga {
        #[arg(long)]
        ckpt: PathBuf,
        /// `.wav` or `audio.bin` features.
        #[arg(long)]
        audio: PathBuf,
        /// Pose file (`.bin` or `.jsonl`); its first frame is used.
        #[arg(long)]
        pose0: PathBuf,
        /// Frames to generate; defaults to the audio length.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Motion masks for a pose sequence.
    Masks {
        #[arg(long)]
        poses: PathBuf,
        /// Keypoint layout JSON; defaults to the configured layout.
        #[arg(long)]
        layout: Option<PathBuf>,
        /// `HxW`, e.g. `64x64`.
        #[arg(long, default_value = "64x64")]
        size: String,
    },
    /// Train the video stage.
    TrainVideo {
        #[arg(long)]
        resume: bool,
    },
    /// Generate a video from a reference image and audio.
    SampleVideo(SampleVideoArgs),
    /// Audio to poses to masks to video, writing every intermediate.
    Pipeline {
        #[command(flatten)]
        inputs: PipelineInputs,
        /// Train missing checkpoints first.
        #[arg(long)]
        train_first: bool,
        #[arg(long)]
        ckpt1: Option<PathBuf>,
        #[arg(long)]
        ckpt2: Option<PathBuf>,
    },
    /// FGD, diversity, PSNR and SSIM between two clip directories. The
    /// report goes to `--out` when it names a `.json` file, otherwise to
    /// `<out>/report.json`.
    Eval {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        gen: PathBuf,
    },
    /// Loss-weight sensitivity sweep for the pose stage.
    Sweep {
        /// Comma-separated `f:b` ratios; defaults to the configured list.
        #[arg(long)]
        ratios: Option<String>,
    },
    /// Ablation runs against the base model.
    Ablate {
        /// Variant name, or `all`.
        #[arg(long, default_value = "all")]
        variant: String,
    },
    /// Render a loss CSV, pose file or frame directory to a PNG.
    Visualize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
pub struct PipelineInputs {
    /// Audio input; a demo WAV is synthesised when omitted.
    #[arg(long)]
    pub audio: Option<PathBuf>,
    /// Reference image; a held-out corpus frame is used when omitted.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    /// Initial pose; a held-out corpus pose is used when omitted.
    #[arg(long)]
    pub pose0: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub speaker: usize,
}

#[derive(Debug, Clone, Args)]
pub struct SampleVideoArgs {
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub audio: PathBuf,
    #[arg(long)]
    pub pose0: PathBuf,
    #[arg(long)]
    pub ckpt1: PathBuf,
    #[arg(long)]
    pub ckpt2: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub speaker: usize,
}

/// Exit status for missing inputs.
pub const EXIT_MISSING_INPUT: i32 = 2;

/// Maps an error to the process exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<mmgt::MmgtError>() {
        Some(mmgt::MmgtError::NotFound(_)) => EXIT_MISSING_INPUT,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    commands::dispatch(cli)
}

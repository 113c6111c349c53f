use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{Format, Network};

#[derive(Debug, Parser)]
#[command(name = "letflow", version, about = "Sparse optical flow on learned illumination-invariant features")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML file with defaults for any of the settings below.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Binary weights file; without it the built-in network is used.
    #[arg(long, global = true, value_name = "PATH")]
    pub weights: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub network: Option<Network>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    /// Write the report here instead of stdout.
    #[arg(long, short, global = true, value_name = "PATH")]
    pub output: Option<PathBuf>,
    /// Worker threads; 1 gives the sequential reference path.
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(1..))]
    pub threads: Option<u32>,
    /// Run the network on a downscaled copy of each image.
    #[arg(long, global = true)]
    pub inference_scale: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct DetectFlags {
    #[arg(long)]
    pub max_points: Option<usize>,
    #[arg(long)]
    pub score_threshold: Option<f32>,
    #[arg(long)]
    pub min_interval: Option<usize>,
    #[arg(long)]
    pub border: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct TrackFlags {
    #[arg(long)]
    pub window_radius: Option<usize>,
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f32>,
    #[arg(long)]
    pub min_eigen_threshold: Option<f32>,
    #[arg(long, conflicts_with = "no_fb_check")]
    pub fb_threshold: Option<f32>,
    /// Skip the forward-backward check.
    #[arg(long)]
    pub no_fb_check: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Detect keypoints in one image.
    Detect {
        image: PathBuf,
        #[command(flatten)]
        detect: DetectFlags,
    },
    /// Detect keypoints in the first image and track them into the second.
    Track {
        image_a: PathBuf,
        image_b: PathBuf,
        /// CSV of `x,y[,score]` rows to track instead of detected keypoints.
        #[arg(long, value_name = "PATH")]
        points: Option<PathBuf>,
        #[command(flatten)]
        detect: DetectFlags,
        #[command(flatten)]
        track: TrackFlags,
    },
    /// Score image pairs listed in a manifest against their homographies.
    Eval {
        /// One pair per line: `pathA pathB h00 h01 h02 h10 h11 h12 h20 h21 h22`.
        manifest: PathBuf,
        #[command(flatten)]
        detect: DetectFlags,
        #[command(flatten)]
        track: TrackFlags,
    },
    /// Median per-stage wall time of one frame step.
    Bench {
        image_a: PathBuf,
        /// Defaults to the first image.
        image_b: Option<PathBuf>,
        #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u32).range(1..))]
        iterations: u32,
        #[command(flatten)]
        detect: DetectFlags,
        #[command(flatten)]
        track: TrackFlags,
    },
    /// Per-frame rejection rate over a directory of numbered frames, on the
    /// feature maps and on raw RGB.
    Sequence {
        dir: PathBuf,
        /// Re-detect when fewer points than this survive.
        #[arg(long, default_value_t = 100)]
        floor: usize,
        #[command(flatten)]
        detect: DetectFlags,
        #[command(flatten)]
        track: TrackFlags,
    },
    /// Write synthetic test data.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Create or inspect weights files.
    #[command(subcommand)]
    Weights(WeightsCommand),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PairKind {
    Translation,
    Homography,
    Spotlight,
    Blur,
}

#[derive(Debug, Subcommand)]
pub enum SynthCommand {
    /// Two images plus a one-line manifest with their ground-truth warp.
    Pair {
        out_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = PairKind::Translation)]
        kind: PairKind,
        #[arg(long, default_value_t = 3.7, allow_negative_numbers = true)]
        dx: f64,
        #[arg(long, default_value_t = -2.3, allow_negative_numbers = true)]
        dy: f64,
        #[arg(long, default_value_t = 1.5)]
        sigma: f64,
        #[arg(long, default_value_t = 256)]
        width: usize,
        #[arg(long, default_value_t = 256)]
        height: usize,
    },
    /// Numbered frames under a drifting spotlight.
    Sequence {
        out_dir: PathBuf,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 256)]
        width: usize,
        #[arg(long, default_value_t = 256)]
        height: usize,
    },
}

#[derive(Debug, Subcommand)]
pub enum WeightsCommand {
    /// Write the built-in or seeded random network to a file.
    Init { path: PathBuf },
    /// Print layer shapes and parameter sums of a weights file.
    Show { path: PathBuf },
}

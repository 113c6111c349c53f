//! `letflow` command-line tool.

mod cli;
mod commands;
mod config;
mod error;
mod io;

use std::process::ExitCode;

use clap::Parser;

use cli::{Cli, Command, DetectFlags, SynthCommand, TrackFlags, WeightsCommand};
use commands::PairSpec;
use config::RunConfig;
use error::CliError;

fn run(cli: Cli) -> Result<(), CliError> {
    let no_detect = DetectFlags::default();
    let no_track = TrackFlags::default();
    let (detect, track) = match &cli.command {
        Command::Detect { detect, .. } => (detect, &no_track),
        Command::Track { detect, track, .. }
        | Command::Eval { detect, track, .. }
        | Command::Bench { detect, track, .. }
        | Command::Sequence { detect, track, .. } => (detect, track),
        Command::Synth(_) | Command::Weights(_) => (&no_detect, &no_track),
    };
    let cfg = RunConfig::resolve(&cli.global, detect, track)?;
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n as usize)
            .build_global()
            .map_err(|e| CliError::Internal(e.to_string()))?;
    }

    let body = match &cli.command {
        Command::Detect { image, .. } => commands::detect_cmd(&cfg, image)?,
        Command::Track { image_a, image_b, points, .. } => {
            commands::track_cmd(&cfg, image_a, image_b, points.as_deref())?
        }
        Command::Eval { manifest, .. } => commands::eval_cmd(&cfg, manifest)?,
        Command::Bench { image_a, image_b, iterations, .. } => {
            commands::bench_cmd(&cfg, image_a, image_b.as_deref(), *iterations)?
        }
        Command::Sequence { dir, floor, .. } => commands::sequence_cmd(&cfg, dir, *floor)?,
        Command::Synth(SynthCommand::Pair { out_dir, kind, dx, dy, sigma, width, height }) => {
            let spec = PairSpec {
                kind: *kind,
                dx: *dx,
                dy: *dy,
                sigma: *sigma,
                width: *width,
                height: *height,
            };
            commands::synth_pair_cmd(&cfg, out_dir, &spec)?
        }
        Command::Synth(SynthCommand::Sequence { out_dir, frames, width, height }) => {
            commands::synth_sequence_cmd(&cfg, out_dir, *frames, *width, *height)?
        }
        Command::Weights(WeightsCommand::Init { path }) => commands::weights_init_cmd(&cfg, path)?,
        Command::Weights(WeightsCommand::Show { path }) => commands::weights_show_cmd(&cfg, path)?,
    };
    io::emit(cli.global.output.as_deref(), &body)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 3 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("letflow: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

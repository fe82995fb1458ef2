//! `forge`: building footprint extraction from the command line.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::*;

#[derive(Parser)]
#[command(name = "forge", version, about = "Building footprint extraction: labels, training, tiled inference, fusion and evaluation")]
#[command(after_help = "Any flag can also come from `--config FILE`, a text file of `key = value` lines \
(e.g. `workers = 4`). Flags on the command line take precedence.\n\n\
Exit status: 0 on success, 1 when the operation fails (one `error[kind]: message` line on stderr), 2 on usage errors.")]
struct Cli {
    /// Log progress to stderr (RUST_LOG also works).
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Turn a building mask into training labels.
    Encode(EncodeArgs),
    /// Train a network on a chip manifest.
    Train(TrainArgs),
    /// Label an image with one model or two fused models.
    Infer(InferArgs),
    /// Average two probability maps and decide per pixel.
    Fuse(FuseArgs),
    /// Score a prediction against ground truth for one site.
    Eval(EvalArgs),
    /// Find the integer shift that best aligns footprints with a reference mask.
    Align(AlignArgs),
    /// Cut labeled training chips from a scene.
    Chips(ChipsArgs),
    /// Per-band statistics of one or more images.
    Stats(StatsArgs),
    /// Join per-site CSVs into summary tables and strip plots.
    Report(ReportArgs),
    /// Write a synthetic scene (image, mask, footprints).
    Synth(SynthArgs),
}

fn main() -> ExitCode {
    let args = match config::expand(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error[usage]: {e:#}");
            return ExitCode::from(2);
        }
    };
    // clap exits with status 2 on usage errors and 0 for --help/--version.
    let cli = Cli::parse_from(args);
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let result = match cli.command {
        Command::Encode(a) => encode(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Fuse(a) => fuse(a),
        Command::Eval(a) => eval(a),
        Command::Align(a) => align(a),
        Command::Chips(a) => chips(a),
        Command::Stats(a) => stats(a),
        Command::Report(a) => report(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{}]: {message}", error_kind(&e));
            ExitCode::from(1)
        }
    }
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    use footprint_core::Error as E;
    for cause in e.chain() {
        if let Some(core) = cause.downcast_ref::<E>() {
            return match core {
                E::Io(_) => "io",
                E::Format(_) | E::Csv(_) | E::Json(_) => "format",
                E::Shape(_) => "shape",
                E::Argument(_) => "argument",
                E::Mode(_) => "mode",
                E::Geometry(_) => "geometry",
                E::CorruptIndices { .. } => "indices",
                E::UndefinedScore(_) => "undefined-score",
                E::Config(_) => "config",
                E::Divergence { .. } => "divergence",
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "failed"
}

//! abfp: simulate tiled matrix products on a virtual analog accelerator,
//! measure how far they stray from float32, and recover accuracy by
//! finetuning. See README.md for the commands and their artifacts.

mod commands;
mod config;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{build_settings, Defaults, FileConfig, RawArgs};

#[derive(Parser)]
#[command(name = "abfp", version, about = "adaptive block floating-point device simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the toy float32 baseline and write its checkpoint
    TrainFloat32(CommonArgs),
    /// Evaluate a checkpoint on the device across a tile/gain/noise grid
    Sweep(CommonArgs),
    /// Rerun the random-tensor error experiment and write stats + histograms
    AppendixError(CommonArgs),
    /// Per-layer device-vs-float32 difference statistics for a checkpoint
    Profile(CommonArgs),
    /// Recover a degraded checkpoint with QAT or DNF
    Finetune(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// flat key=value config file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// model checkpoint to evaluate or finetune
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// comma-separated tile widths
    #[arg(long)]
    tiles: Option<String>,
    /// comma-separated analog gains
    #[arg(long)]
    gains: Option<String>,
    /// bitwidths as bW/bX/bY
    #[arg(long)]
    bits: Option<String>,
    /// comma-separated output-noise widths in LSBs (0 = off)
    #[arg(long = "noise-lsb")]
    noise_lsb: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// repetitions per grid cell
    #[arg(long)]
    reps: Option<String>,
    /// output path (CSV report or checkpoint)
    #[arg(long)]
    out: Option<PathBuf>,
    /// finetune method: qat or dnf
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    /// DNF noise placement: all, none, or top:K
    #[arg(long = "select-layers")]
    select_layers: Option<String>,
    /// where appendix-error puts histogram JSON files
    #[arg(long = "hist-dir")]
    hist_dir: Option<PathBuf>,
}

fn run(cmd: &Cmd) -> abfp::error::Result<()> {
    let (args, defaults, go): (&CommonArgs, Defaults, fn(&config::Settings) -> _) = match cmd {
        Cmd::TrainFloat32(a) => (
            a,
            Defaults { noise_lsb: "0", out: "model.ckpt", reps: "1" },
            commands::cmd_train_float32,
        ),
        Cmd::Sweep(a) => (
            a,
            Defaults { noise_lsb: "0", out: "sweep.csv", reps: "1" },
            commands::cmd_sweep,
        ),
        Cmd::AppendixError(a) => (
            a,
            Defaults { noise_lsb: "0,1", out: "appendix.csv", reps: "10" },
            commands::cmd_appendix_error,
        ),
        Cmd::Profile(a) => (
            a,
            Defaults { noise_lsb: "0", out: "profile.csv", reps: "1" },
            commands::cmd_profile,
        ),
        Cmd::Finetune(a) => (
            a,
            Defaults { noise_lsb: "1", out: "finetuned.ckpt", reps: "1" },
            commands::cmd_finetune,
        ),
    };
    let file = FileConfig::load(args.config.as_deref())?;
    let raw = RawArgs {
        checkpoint: args.checkpoint.as_deref(),
        tiles: args.tiles.as_deref(),
        gains: args.gains.as_deref(),
        bits: args.bits.as_deref(),
        noise_lsb: args.noise_lsb.as_deref(),
        seed: args.seed.as_deref(),
        reps: args.reps.as_deref(),
        out: args.out.as_deref(),
        method: args.method.as_deref(),
        epochs: args.epochs.as_deref(),
        batch: args.batch.as_deref(),
        lr: args.lr.as_deref(),
        select_layers: args.select_layers.as_deref(),
        hist_dir: args.hist_dir.as_deref(),
    };
    let settings = build_settings(&raw, &file, &defaults)?;
    go(&settings)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

//! `tsbnet`: dataset generation, training, evaluation, gradient checks and
//! the ablation ladder from the command line.

mod commands;
mod error;
mod manifest;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "tsbnet", version, about = "Two-stream binocular fingertip network")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PhaseArg {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
    Both,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic stereo dataset.
    GenData {
        /// Records to generate in `--split`.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        count: u64,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        /// Extra test records written next to a training split.
        #[arg(long, default_value_t = 0)]
        test_count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Rig overrides as `key = value` lines (f, b, lambda, w, h).
        #[arg(long)]
        rig: Option<PathBuf>,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
        threads: u64,
    },
    /// Run one training phase.
    Train {
        #[arg(long, value_enum)]
        phase: PhaseArg,
        #[arg(long)]
        data: PathBuf,
        /// Starting checkpoint; required for finetuning.
        #[arg(long)]
        init: Option<PathBuf>,
        /// `key = value` file with `model.*` and `train.*` keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iters: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Cap on training records.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long, required_unless_present = "inject_truth")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Use the ground-truth 3D labels as predictions.
        #[arg(long)]
        inject_truth: bool,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        /// Target name or `all`.
        #[arg(long, default_value = "all")]
        target: String,
        #[arg(long, default_value_t = 3)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "both")]
        precision: PrecisionArg,
        /// Also write `gradcheck.csv` and a run manifest here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate the six-row incremental ablation.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `key = value` file with `model.*`, `pretrain.*` and `finetune.*` keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        pretrain_iters: Option<u64>,
        #[arg(long)]
        finetune_iters: Option<u64>,
        /// Cap on records per split.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Replay the command recorded in a run manifest.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData {
            count,
            split,
            test_count,
            seed,
            out,
            rig,
            threads,
        } => commands::gen_data(count as usize, split, test_count, seed, &out, rig.as_deref(), threads as usize),
        Command::Train {
            phase,
            data,
            init,
            config,
            out,
            seed,
            iters,
            lr,
            batch_size,
            limit,
        } => commands::train(commands::TrainArgs {
            phase,
            data,
            init,
            config,
            out,
            seed,
            iters,
            lr,
            batch_size,
            limit,
        }),
        Command::Eval {
            ckpt,
            data,
            out,
            split,
            inject_truth,
        } => commands::eval(ckpt.as_deref(), &data, &out, split, inject_truth),
        Command::Gradcheck {
            target,
            trials,
            seed,
            precision,
            out,
        } => commands::gradcheck(&target, trials, seed, precision, out.as_deref()),
        Command::Ablate {
            data,
            out,
            config,
            seed,
            pretrain_iters,
            finetune_iters,
            limit,
        } => commands::ablate(commands::AblateArgs {
            data,
            out,
            config,
            seed,
            pretrain_iters,
            finetune_iters,
            limit,
        }),
        Command::Rerun { manifest } => commands::rerun(&manifest),
    }
}

fn main() {
    let cli = Cli::try_parse().unwrap_or_else(|e| e.exit());
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

//! `cngcf` command-line entry point.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cngcf::error::ErrorClass;
use cngcf::eval::SweepAxis;

#[derive(Debug, Parser)]
#[command(name = "cngcf", version, about = "Causal graph collaborative filtering experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset dump.
    Synth(Common),
    /// Convert raw interaction logs into a canonical dump.
    Ingest(DataArgs),
    /// Train a model and write its checkpoints and training log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on its test split.
    Evaluate(EvalArgs),
    /// Train and compare the ablation variants.
    Ablate(DataArgs),
    /// Train across one hyperparameter axis.
    Sweep(SweepArgs),
    /// Grid search over learning rate, L2 weight and dropout.
    Gridsearch(DataArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Master seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DataArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory; overrides the config file.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Cutoff to report; repeat for several.
    #[arg(long = "k")]
    ks: Vec<usize>,
    /// Concurrent training runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Train the matrix factorisation baseline instead.
    #[arg(long)]
    mf: bool,
    /// Continue the run found in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint directory.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory, when it differs from the one recorded at training.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long = "k")]
    ks: Vec<usize>,
    /// Where to write `report.json`; printed only when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AxisArg {
    EmbeddingSize,
    Dropout,
}

impl From<AxisArg> for SweepAxis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::EmbeddingSize => SweepAxis::EmbeddingSize,
            AxisArg::Dropout => SweepAxis::Dropout,
        }
    }
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum)]
    axis: AxisArg,
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numeric => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CNGCF_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}

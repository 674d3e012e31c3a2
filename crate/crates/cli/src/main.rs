//! `iterseg`: dataset generation, staged training, iterated inference and evaluation.

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use iterseg_core::Error;

#[derive(Parser)]
#[command(name = "iterseg", version, about = "Iterative instance segmentation on synthetic shape scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// Flat `key = value` config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the `seed` config key.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Clone)]
pub struct OutDir {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Write into an existing non-empty directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenerateData {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        out: OutDir,
    },
    /// Train all stages and write per-stage checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        out: OutDir,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
    },
    /// Segment detections with a trained checkpoint.
    Infer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        out: OutDir,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Test-time iterations (default from config, 3).
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long, value_enum)]
        superpixels: Option<OnOff>,
        /// Also write every intermediate heatmap.
        #[arg(long)]
        emit_trajectory: bool,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        /// Restrict to a single scene id.
        #[arg(long)]
        scene: Option<u64>,
    },
    /// Region AP of a predictions directory against the dataset ground truth.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        out: OutDir,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Predictions of a baseline model for the overlap scatter.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Finite-difference gradient check of the reduced architecture.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Number of consecutive seeds to check, starting at `--seed`.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Scale analytic gradients by 1.01; the check must then fail.
        #[arg(long)]
        corrupt: bool,
        /// Optional JSON report path.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run held-out patches under every category label.
    Probe {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        out: OutDir,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        /// Number of held-out patches, spread evenly over the split.
        #[arg(long, default_value_t = 20)]
        samples: usize,
    },
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Usage(_) => 2,
        Error::Divergence { .. } => 3,
        Error::Checkpoint(_) => 4,
        Error::Data(_) => 5,
        Error::Config(_) | Error::Internal(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenerateData { common, out } => commands::generate_data(&common, &out),
        Command::Train { common, out, data } => commands::train(&common, &out, &data),
        Command::Infer {
            common,
            out,
            checkpoint,
            data,
            iterations,
            superpixels,
            emit_trajectory,
            split,
            scene,
        } => commands::infer(
            &common,
            &out,
            &commands::InferArgs {
                checkpoint,
                data,
                iterations,
                superpixels,
                emit_trajectory,
                split,
                scene,
            },
        ),
        Command::Evaluate {
            common,
            out,
            predictions,
            data,
            baseline,
        } => commands::evaluate(&common, &out, &predictions, &data, baseline.as_deref()),
        Command::Gradcheck {
            common,
            seeds,
            corrupt,
            report,
        } => commands::gradcheck(&common, seeds, corrupt, report.as_deref()),
        Command::Probe {
            common,
            out,
            checkpoint,
            data,
            iterations,
            samples,
        } => commands::probe(&common, &out, &checkpoint, &data, iterations, samples),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

//! Command line entry point. Exit codes: 0 ok, 1 io, 2 validation,
//! 3 numerical failure.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use normshift_core::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "normshift",
    about = "Train and evaluate small convolutional classifiers with adaptive normalization under synthetic domain shift"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset file for one domain spec.
    GenData {
        /// Domain spec: "source", "corruption:<type>:<level>", or "style:<name>".
        #[arg(long)]
        spec: String,
        /// Output dataset path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of images.
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
    },
    /// Train a model from a JSON run config into a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Evaluate a checkpoint over a domain grid and write metrics.csv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// "full" or a comma-separated list of domain specs.
        #[arg(long, default_value = "full")]
        grid: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 400)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value = "run")]
        run_id: String,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite over every layer.
    Gradcheck {
        /// Seeds to check; five fixed seeds by default.
        #[arg(long, num_args = 1.., default_values_t = [11u64, 22, 33, 44, 55])]
        seeds: Vec<u64>,
    },
    /// Export per-sample learned standardization statistics as CSV.
    DumpStats {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Domain spec for the probe dataset.
        #[arg(long, default_value = "source")]
        spec: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        n: usize,
        /// Norm layer index (0-based conv block).
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Io(_) => 1,
        Error::Numeric(_) => 3,
        Error::Shape(_) | Error::Invalid(_) | Error::Format(_) => 2,
    }
}

fn main() -> ExitCode {
    if let Ok(v) = std::env::var("NORMSHIFT_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n >= 1 => normshift_core::augment::set_workers(n),
            _ => {
                eprintln!("error: NORMSHIFT_THREADS must be a positive integer, got \"{v}\"");
                return ExitCode::from(2);
            }
        }
    }

    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { spec, out, seed, n, classes } => {
            commands::gen_data(&spec, &out, seed, n, classes)
        }
        Command::Train { config, out_dir } => commands::train(&config, &out_dir),
        Command::Eval { checkpoint, grid, seed, n, batch, run_id, out } => {
            commands::eval(&checkpoint, &grid, seed, n, batch, &run_id, &out)
        }
        Command::Gradcheck { seeds } => commands::gradcheck(&seeds),
        Command::DumpStats { checkpoint, spec, seed, n, layer, out } => {
            commands::dump_stats(&checkpoint, &spec, seed, n, layer, &out)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

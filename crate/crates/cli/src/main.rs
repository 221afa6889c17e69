//! `gtn`: train, evaluate and verify generalized tensor network classifiers.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric
//! failure, 4 verification failure. `GTN_THREADS` sets the worker count.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Parser, Subcommand, ValueEnum};
use gtn::verify::{Fault, Scale};

use commands::{EvalData, TrainArgs};

pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_VERIFY: u8 = 4;

pub struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    pub fn new(code: u8, error: anyhow::Error) -> Self {
        Failure { code, error }
    }
}

/// Tags any error with the exit code it should produce.
pub trait CodeExt<T> {
    fn code(self, code: u8) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> CodeExt<T> for Result<T, E> {
    fn code(self, code: u8) -> Result<T, Failure> {
        self.map_err(|e| Failure::new(code, e.into()))
    }
}

#[derive(Parser)]
#[command(name = "gtn", version, about = "Generalized tensor network classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Small,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    SignFlip,
}

#[derive(Clone, Copy, ValueEnum)]
enum Generator {
    Xor,
    Checkerboard,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a run config; writes metrics.csv, model.ckpt and summary.json.
    Train {
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Print per-epoch metrics to stderr.
        #[arg(short, long)]
        verbose: bool,
    },
    /// Accuracy and confusion matrix of a checkpoint on a dataset.
    Eval {
        checkpoint: PathBuf,
        /// Run config whose data section supplies the dataset.
        #[arg(long, conflicts_with_all = ["images", "sequence_csv"])]
        config: Option<PathBuf>,
        /// Split of the config's data: train, val or test.
        #[arg(long, default_value = "test", requires = "config")]
        split: String,
        #[arg(long, requires = "labels")]
        images: Option<PathBuf>,
        #[arg(long, requires = "images")]
        labels: Option<PathBuf>,
        #[arg(long)]
        sequence_csv: Option<PathBuf>,
        /// Confusion matrix CSV; defaults to confusion.csv beside the checkpoint.
        #[arg(long)]
        confusion: Option<PathBuf>,
    },
    /// Run the oracle and property battery.
    Verify {
        #[arg(long, value_enum, default_value = "small")]
        scale: ScaleArg,
        /// Deliberately corrupt the analytic gradient.
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
    },
    /// Write the learned feature table of a checkpoint as CSV.
    ExportFeatures {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        table: usize,
        /// Output file; stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Generate a synthetic two-variable dataset as sequence CSV.
    GenData {
        #[arg(value_enum)]
        kind: Generator,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        /// Checkerboard cells per axis.
        #[arg(long, default_value_t = 4)]
        cells: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var("GTN_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::new(EXIT_CONFIG, anyhow!("GTN_THREADS={value:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().code(EXIT_CONFIG)
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    match cli.command {
        Command::Train {
            config,
            output_dir,
            seed,
            verbose,
        } => commands::train(TrainArgs {
            config,
            output_dir,
            seed,
            verbose,
        }),
        Command::Eval {
            checkpoint,
            config,
            split,
            images,
            labels,
            sequence_csv,
            confusion,
        } => {
            let data = match (config, images, labels, sequence_csv) {
                (Some(path), _, _, _) => EvalData::Config { path, split },
                (None, Some(images), Some(labels), _) => EvalData::Idx { images, labels },
                (None, None, None, Some(path)) => EvalData::SequenceCsv(path),
                _ => {
                    return Err(Failure::new(
                        EXIT_CONFIG,
                        anyhow!("give --config, --images with --labels, or --sequence-csv"),
                    ))
                }
            };
            commands::eval(&checkpoint, data, confusion)
        }
        Command::Verify { scale, inject_fault } => {
            let scale = match scale {
                ScaleArg::Small => Scale::Small,
                ScaleArg::Full => Scale::Full,
            };
            commands::verify(scale, inject_fault.map(|FaultArg::SignFlip| Fault::GradientSignFlip))
        }
        Command::ExportFeatures {
            checkpoint,
            table,
            output,
        } => commands::export_features(&checkpoint, table, output),
        Command::GenData {
            kind,
            n,
            cells,
            seed,
            output,
        } => {
            let name = match kind {
                Generator::Xor => "xor",
                Generator::Checkerboard => "checkerboard",
            };
            commands::gen_data(name, n, cells, seed, &output)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors are configuration errors; help and version succeed.
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Failure;

#[derive(Debug, Parser)]
#[command(name = "defectforge", version, about = "Simulate labelled defect samples and train a segmenter on them")]
struct Cli {
    /// TOML run configuration; defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `paths.work`.
    #[arg(long, global = true)]
    work: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic benchmark (backgrounds, references, real train and test splits).
    Synth {
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one transfer network per defect type.
    TrainDst {
        /// Restrict to these defect types (stain, scratch, hole).
        #[arg(long = "type", value_delimiter = ',')]
        types: Vec<String>,
    },
    /// Generate a simulated training set from the trained networks.
    Generate(GenerateArgs),
    /// Train the segmentation network.
    TrainSeg(TrainSegArgs),
    /// Evaluate a segmentation network on a test manifest.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Train and evaluate every scenario for every seed.
    Compare {
        #[arg(long, value_delimiter = ',')]
        scenarios: Vec<String>,
        /// Use seeds 0..N instead of the configured list.
        #[arg(long)]
        seeds: Option<u64>,
    },
    /// Check every loss gradient against central differences.
    Gradcheck,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Emit histogram-matched samples without the transfer networks.
    #[arg(long)]
    hist_only: bool,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainSegArgs {
    /// Training manifests; the real training split when absent.
    #[arg(long = "train")]
    train: Vec<PathBuf>,
    /// Manifest evaluated after every epoch.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::run(cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

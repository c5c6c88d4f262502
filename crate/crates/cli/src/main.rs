//! `rose`: data generation, training, inference and evaluation pipelines.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rose_core::bench::Subset;

/// Video object removal with side-effect awareness.
#[derive(Debug, Parser)]
#[command(name = "rose", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand.
#[derive(Debug, Args)]
struct Common {
    /// JSON configuration; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render paired (original, edited, mask) triplets.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Triplets per category.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        /// Comma-separated category names.
        #[arg(long, value_delimiter = ',')]
        categories: Option<Vec<String>>,
    },
    /// Keep the triplets whose masks pass the valid-view filter.
    Filter {
        #[command(flatten)]
        common: Common,
        /// Dataset directory holding manifest.json.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        min_fg_ratio: Option<f64>,
        #[arg(long)]
        min_frame_fraction: Option<f64>,
    },
    /// Apply one mask augmentation.
    Augment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mask: PathBuf,
        /// original, point, bbox, dilate or erode; sampled when omitted.
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        radius: Option<usize>,
    },
    /// Train a model on a dataset directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        /// reference or baseline.
        #[arg(long)]
        conditioning: Option<String>,
        /// Comma-separated categories to train on.
        #[arg(long, value_delimiter = ',')]
        categories: Option<Vec<String>>,
        /// Use at most this many triplets.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Remove the masked object from a video.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Denoising steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Score one output video.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Ground truth, for paired metrics.
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Evaluate a method on a benchmark directory.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bench_dir: PathBuf,
        #[arg(long, value_parser = parse_subset)]
        subset: Option<Subset>,
        /// Checkpoint to evaluate; identity or oracle via --method otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
    },
}

fn parse_subset(s: &str) -> Result<Subset, String> {
    s.parse()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code())
        }
    }
}

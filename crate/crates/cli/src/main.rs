//! `casp`: match image pairs, evaluate on synthetic scenes, benchmark the
//! matching stage and run the invariant self-test.

mod commands;
mod imageio;

use std::path::PathBuf;
use std::process::ExitCode;

use casp_core::backbone::Variant;
use casp_core::config::{Mode, PadPolicy};
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "casp", version, about = "Cascaded semi-dense feature matching")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Flat `key = value` config file; flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub variant: Option<Variant>,
    /// Correspondence priors per 1/16 token (at least 4).
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Confidence threshold for coarse matches.
    #[arg(long, global = true)]
    pub theta: Option<f32>,
    /// Refinement window side in 1/2-scale cells.
    #[arg(long, global = true)]
    pub w: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for the numeric kernels.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory; without it results go to stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Match two images and print the correspondences as JSON.
    Match {
        image_a: PathBuf,
        image_b: PathBuf,
        /// Weight container; seeded random weights (demo only) when absent.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        pad: Option<PadPolicy>,
    },
    /// Run the synthetic evaluation described by a JSON spec file.
    Eval {
        spec: PathBuf,
        /// Include wall-clock timings in the report.
        #[arg(long)]
        timing: bool,
    },
    /// Time and count operations of global against cascaded matching.
    Bench {
        /// Square image sides in pixels.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Run the invariant suite at small sizes.
    Selftest {
        /// Also validate this weight container.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CASP_LOG", "warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("casp: {e}");
            ExitCode::from(e.code())
        }
    }
}

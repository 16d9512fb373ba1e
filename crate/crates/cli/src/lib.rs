//! Command-line frontend over the flow library: train, sample, classify,
//! attribute, and evaluate as one-command-per-process subcommands.
//!
//! `run` is the whole program; the binary is a one-line wrapper so tests can
//! drive every path in-process and assert on exit codes.

mod commands;
mod config;

pub use commands::EvalArgs;
pub use config::{
    DataSource, DatasetSection, ModelKind, ModelSection, RunConfig, TrainSection,
};

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use magicflow_core::FlowError;

#[derive(Parser)]
#[command(
    name = "magicflow",
    version,
    about = "Conditional normalizing flows on small images: exact likelihoods, \
             sampling, classification, and per-pixel attribution",
    after_help = "The MAGICFLOW_SEED environment variable overrides the seed from \
                  any config file or flag."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a flow from a TOML config; writes model.ckpt + train_metrics.txt.
    Train {
        /// Run configuration (TOML).
        config: PathBuf,
    },
    /// Draw samples from a checkpoint as .pgm/.ten graymap artifacts.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Class to condition on.
        #[arg(long, default_value_t = 0)]
        label: usize,
        /// Number of samples.
        #[arg(long, default_value_t = 1)]
        n: usize,
        /// Prior scale; 1.0 samples the model, smaller is conservative.
        /// Must be positive (checked by the model, not the parser).
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Label .ten images by exact per-class log-likelihood argmax.
    Classify {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV output: <path>,<argmax>,<loglik_0>,...,<loglik_{K-1}>.
        #[arg(long, default_value = "results.csv")]
        out: PathBuf,
        /// Input images (.ten).
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Per-pixel log-likelihood maps for .ten images, as graymap artifacts.
    Attribute {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Class to attribute under.
        #[arg(long, default_value_t = 0)]
        label: usize,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// Input images (.ten).
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Distribution metrics between a real and a generated dataset directory.
    Evaluate(commands::EvalArgs),
}

/// Exit codes: 0 success, 2 configuration, 3 shape/contract, 4 numerical
/// breakdown, 5 file I/O or format.
fn exit_code(e: &FlowError) -> i32 {
    match e {
        FlowError::Config(_) => 2,
        FlowError::Dim(_) | FlowError::Contract(_) => 3,
        FlowError::NonFinite(_) | FlowError::Numerical(_) | FlowError::Degenerate(_) => 4,
        FlowError::Io(_) | FlowError::Format(_) => 5,
    }
}

fn env_seed_override() -> Result<Option<u64>, String> {
    match std::env::var("MAGICFLOW_SEED") {
        Ok(s) => s
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| format!("MAGICFLOW_SEED must be an unsigned integer, got {s:?}")),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(format!("MAGICFLOW_SEED: {e}")),
    }
}

/// The whole program: parse argv, dispatch, map errors to exit codes.
/// Everything is reachable in-process; no global state beyond the
/// MAGICFLOW_SEED lookup.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // --help/--version land here too; those are success paths.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let env_seed = match env_seed_override() {
        Ok(s) => s,
        Err(msg) => {
            eprintln!("error: {msg}");
            return 2;
        }
    };
    let result = match cli.cmd {
        Cmd::Train { config } => commands::cmd_train(&config, env_seed),
        Cmd::Sample { checkpoint, label, n, temperature, seed, out_dir } => commands::cmd_sample(
            &checkpoint,
            label,
            n,
            temperature,
            env_seed.unwrap_or(seed),
            &out_dir,
        ),
        Cmd::Classify { checkpoint, out, images } => {
            commands::cmd_classify(&checkpoint, &out, &images)
        }
        Cmd::Attribute { checkpoint, label, out_dir, images } => {
            commands::cmd_attribute(&checkpoint, label, &out_dir, &images)
        }
        Cmd::Evaluate(args) => commands::cmd_evaluate(args, env_seed),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

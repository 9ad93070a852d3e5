//! Command-line surface, file formats, toy tasks and metrics.

pub mod config;
pub mod diagnostics;
pub mod io;
pub mod metrics;
pub mod tasks;

mod commands;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_DIAGNOSTICS: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "cinn", version, about = "Conditional invertible neural networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a run configuration file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// CSV metrics log (overrides `metrics` in the config).
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Draw samples for one or more conditions.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        condition: ConditionArgs,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Encode `(x, y)` pairs to latent codes.
    Encode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        x: PathBuf,
        #[arg(long)]
        y: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode latent codes under new conditions.
    Transfer {
        #[arg(long)]
        ckpt: PathBuf,
        /// Latent codes, `[n, dim]`.
        #[arg(long)]
        z: PathBuf,
        #[command(flatten)]
        condition: ConditionArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Decode a grid of `a1·z1 + a2·z2` (first two rows of `--z`).
    Interpolate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        z: PathBuf,
        #[command(flatten)]
        condition: ConditionArgs,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true,
              default_value = "-0.9,-0.45,0,0.45,0.9")]
        grid: Vec<f64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Decode `α·z` for each `α` (first row of `--z`).
    Scale {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        z: PathBuf,
        #[command(flatten)]
        condition: ConditionArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,0.7,0.9,1,1.25")]
        alphas: Vec<f64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Evaluate a model on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        metric: Metric,
        #[command(flatten)]
        data: DataArgs,
        /// Samples per condition for sample-based metrics.
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Standard deviation of dequantization noise added before `nll`.
        #[arg(long, default_value_t = 0.0)]
        noise_std: f64,
        /// Mixture preset for `modes` (2 or 8).
        #[arg(long, default_value_t = 8)]
        modes: usize,
        /// Evaluate at most this many rows.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Invertibility, log-determinant and gradient diagnostics.
    Check {
        /// Checkpoint to check; fresh models are used when omitted.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Upper bound on parameters compared against finite differences.
        #[arg(long, default_value_t = 400)]
        max_params: usize,
    },
    /// Write a toy dataset as `x.tnsr` and `y.tnsr`.
    GenTask {
        /// JSON task spec, e.g. `{"task":{"kind":"digits"},"seed":1,"samples":500}`.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

/// Conditions: a tensor file, a toy task, or a class index.
#[derive(Debug, Args)]
pub struct ConditionArgs {
    /// Tensor file, `task:<kind>` (conditions drawn from that toy task),
    /// or `class:<k>` (one-hot).
    #[arg(long)]
    pub condition: String,
    /// Number of conditions taken from a task.
    #[arg(long, default_value_t = 1)]
    pub conditions: usize,
    #[arg(long, default_value_t = 0)]
    pub condition_seed: u64,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long, requires = "y", conflicts_with = "task")]
    pub x: Option<PathBuf>,
    #[arg(long, requires = "x")]
    pub y: Option<PathBuf>,
    /// Toy task kind to generate instead of reading files.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub task_seed: u64,
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Nll,
    #[value(name = "bestofN", alias = "bestofn")]
    BestOfN,
    Variance,
    Modes,
}

/// Exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io(_) | Error::Parse { .. } | Error::Version { .. } => EXIT_IO,
        Error::Divergence { .. } | Error::NonFinite { .. } | Error::NonFiniteLoss { .. } => EXIT_DIVERGENCE,
        _ => EXIT_USAGE,
    }
}

/// Run the command line and return the process exit code.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match commands::run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

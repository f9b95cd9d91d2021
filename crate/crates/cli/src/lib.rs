//! The `gradts` command line: generate a synthetic suite, warm up and
//! accumulate head gradients on the toy model, then rank, correlate and
//! select auxiliary tasks. Each subcommand reads earlier artifacts from
//! `output_dir` and the gradient store, and writes its own.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use config::{Overrides, RunConfig};
use error::{CliError, EXIT_CONFIG};

#[derive(Parser, Debug)]
#[command(
    name = "gradts",
    version,
    about = "Auxiliary task selection from attention-head gradients"
)]
pub struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Trial,
    Thres,
    Fg,
    HeuSize,
    HeuType,
    HeuLen,
    NoSel,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic suite and register its tasks in the store.
    Gen,
    /// Warm-up training, one model per task.
    Warmup {
        /// Restrict to these tasks (repeatable); default all.
        #[arg(long = "task")]
        tasks: Vec<String>,
    },
    /// Accumulate task-level head gradients into the store.
    Grad {
        #[arg(long = "task")]
        tasks: Vec<String>,
    },
    /// Accumulate per-instance head gradients into the store.
    GradInstances {
        #[arg(long = "task")]
        tasks: Vec<String>,
    },
    /// Normalize stored tensors into head-importance matrices.
    Rank {
        #[arg(long = "task")]
        tasks: Vec<String>,
    },
    /// Kendall's tau between every pair of stored tasks.
    Correlate,
    /// Choose auxiliary tasks for `--primary`.
    Select {
        #[arg(long, value_enum)]
        strategy: StrategyArg,
        /// Threshold for `thres` or `fg`; defaults to the matching config field.
        #[arg(long, allow_negative_numbers = true)]
        tau: Option<f64>,
    },
    /// Score `--primary` trained with the given auxiliaries.
    Evaluate {
        /// Comma-separated auxiliary tasks.
        #[arg(long, value_delimiter = ',', conflicts_with = "strategy")]
        aux: Vec<String>,
        /// Take auxiliaries (and kept instances) from a saved selection.
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
    },
    /// Collect saved selections into a summary and heatmap CSVs.
    Report,
    /// Check the store against its manifest.
    ValidateStore,
}

/// Parses `args`, runs the command and returns the process exit code.
/// Output goes to stdout; errors go to stderr as JSON.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // Help and version text; a closed pipe is not an error.
            let _ = write!(std::io::stdout(), "{e}");
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default();
            let err = CliError::Config(vec![first.trim_start_matches("error: ").to_owned()]);
            eprintln!("{}", err.to_json());
            return EXIT_CONFIG;
        }
    };
    match run(&cli) {
        Ok(lines) => {
            let mut out = std::io::stdout().lock();
            for line in lines {
                if writeln!(out, "{line}").is_err() {
                    break;
                }
            }
            0
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}

/// Runs a parsed command; returns the lines to print.
pub fn run(cli: &Cli) -> error::Result<Vec<String>> {
    let config = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    commands::dispatch(&config, &cli.command)
}

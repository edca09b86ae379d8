//! `owl` — command-line frontend for the open-world detection learning
//! testbed: full protocol runs, parameter sweeps, Weibull fitting, standalone
//! evaluation, and synthetic-world export.

mod commands;
mod config;
mod io;

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use commands::{cmd_eval, cmd_fit_weibull, cmd_gen_world, cmd_run, cmd_sweep, load_config, SweepAxis};

/// Error categories map to distinct exit codes: config 2, runtime 3, schema 4.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
    Schema(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::Schema(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
            CliError::Schema(m) => write!(f, "schema error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

#[derive(Parser)]
#[command(
    name = "owl",
    about = "Open-world detection learning testbed on a deterministic synthetic world",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file (flat `key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override (applied after the file and any --set).
    #[arg(long)]
    seed: Option<u64>,
    /// Override one key, e.g. --set cluster.eta=0.99 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<config::RunConfig, CliError> {
        load_config(self.config.as_deref(), self.seed, &self.set)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the full open-world protocol and write per-task reports.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for report files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a grid of configurations (1 or 2 axes) and consolidate a table.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Sweep axis `key=v1,v2,...` (repeatable, at most twice).
        #[arg(long = "axis", value_name = "KEY=V1,V2,...")]
        axes: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a shifted Weibull distribution to a newline-delimited sample file.
    FitWeibull {
        /// Sample file, one number per line.
        #[arg(long)]
        input: PathBuf,
    },
    /// Evaluate a detections file against a ground-truth file.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long = "ground-truth")]
        ground_truth: PathBuf,
        /// Optional directory for report files (metrics always print).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export the synthetic world's boxes and proposals to CSV files.
    GenWorld {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, out } => cmd_run(&config.load()?, &out),
        Command::Sweep { config, axes, out } => {
            let axes: Vec<SweepAxis> = axes
                .iter()
                .map(|raw| SweepAxis::parse(raw))
                .collect::<Result<_, _>>()?;
            cmd_sweep(&config.load()?, &axes, &out)
        }
        Command::FitWeibull { input } => cmd_fit_weibull(&input),
        Command::Eval {
            config,
            detections,
            ground_truth,
            out,
        } => cmd_eval(&detections, &ground_truth, &config.load()?, out.as_deref()),
        Command::GenWorld { config, out } => cmd_gen_world(&config.load()?, &out),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sdematch::{Error, Result};

use crate::commands::Run;
use crate::config::{parse_pair, parse_text, RunConfig};

/// Latent SDE experiments: data, training, evaluation, sampling and comparisons.
#[derive(Parser)]
#[command(name = "sdematch", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set iterations=200`; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Directory for every output, including the resolved config
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset for the configured system
    GenerateData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write per-step metrics and a checkpoint
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// NELBO with standard error, and forecast error on held-out final observations
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Unconditional paths and observations from the prior
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Prior paths started from the posterior at the last observation
    Forecast {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Gradient norm against horizon and per-step cost for both methods
    Compare {
        #[command(flatten)]
        common: Common,
    },
    /// Exact log-likelihood and smoother marginals of a linear dataset
    KalmanCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenerateData { common }
            | Command::Train { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Sample { common, .. }
            | Command::Forecast { common, .. }
            | Command::Compare { common }
            | Command::KalmanCheck { common, .. } => common,
        }
    }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut pairs = match &common.config {
        Some(path) => parse_text(&std::fs::read_to_string(path)?)?,
        None => Vec::new(),
    };
    for s in &common.set {
        pairs.push(parse_pair(s)?);
    }
    RunConfig::from_pairs(&pairs)
}

fn run(command: &Command) -> Result<()> {
    let common = command.common();
    let run = Run::start(resolve(common)?, common.out_dir.clone())?;
    match command {
        Command::GenerateData { .. } => commands::generate_data(&run).map(|_| ()),
        Command::Train { dataset, .. } => commands::train_model(&run, dataset),
        Command::Evaluate { checkpoint, dataset, .. } => commands::evaluate(&run, checkpoint, dataset),
        Command::Sample { checkpoint, .. } => commands::sample(&run, checkpoint),
        Command::Forecast { checkpoint, dataset, .. } => commands::forecast_paths(&run, checkpoint, dataset),
        Command::Compare { .. } => commands::compare(&run),
        Command::KalmanCheck { dataset, checkpoint, .. } => commands::kalman_check(&run, dataset, checkpoint.as_deref()),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Parse { .. } | Error::Json(_) => 2,
        Error::Diverged { .. } | Error::NonFiniteLoss { .. } | Error::NonFiniteState { .. } | Error::BlowUp { .. } => 3,
        Error::Config(_)
        | Error::Dimension { .. }
        | Error::RaggedBatch
        | Error::EmptySeries
        | Error::TimeOutOfRange { .. }
        | Error::Horizon { .. } => 4,
        Error::Autodiff(_) | Error::Innovation { .. } => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

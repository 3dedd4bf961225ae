//! `posecast`: synthesize, extract, train, predict and evaluate from the
//! command line.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use posecast_core::numerics::NumericsError;
use posecast_core::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::Config(_)) => 1,
            CliError::Core(Error::NonFinite { .. } | Error::Numerics(NumericsError::NonFiniteInput(_))) => 3,
            CliError::Core(_) => 2,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "posecast", version, about = "Multi-agent 3D pose forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command. Each one overrides the config-file key of
/// the same name.
#[derive(Args, Debug)]
pub struct Common {
    /// Plain-text `key=value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct Scenario {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of forecast modes F.
    #[arg(long)]
    pub modes: Option<usize>,
    /// Interaction radius in meters, or `unbounded`.
    #[arg(long)]
    pub radius: Option<String>,
    /// Past frames.
    #[arg(long)]
    pub tp: Option<usize>,
    /// Future frames.
    #[arg(long)]
    pub tf: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic scenes, one JSON-lines file per scene.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Turn camera detections and annotations into registered scene windows.
    Extract {
        /// Directory with cameras/detections/annotations/boxes `.jsonl` files.
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on a scene file or a directory of scene files.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scenario: Scenario,
    },
    /// Forecast every scene in a scene file.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        /// Observe the `T_p` frames before the last `T_f` instead of the last `T_p`.
        #[arg(long)]
        holdout: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Score forecasts against the last frames of each scene.
    Eval {
        #[arg(long)]
        scenes: PathBuf,
        /// Forecast file from `predict --holdout`.
        #[arg(long, conflicts_with = "checkpoint")]
        forecasts: Option<PathBuf>,
        /// Forecast on the fly instead of reading a forecast file.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated timestamps in seconds.
        #[arg(long)]
        eval_at: Option<String>,
        /// Also write `metrics.svg`.
        #[arg(long)]
        plot: bool,
        #[command(flatten)]
        common: Common,
    },
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("T2P_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("T2P_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Synth { common, seed } => commands::synth(&common, seed),
        Command::Extract { input, common } => commands::extract(&input, &common),
        Command::Train { data, common, scenario } => commands::train(&data, &common, &scenario),
        Command::Predict { checkpoint, scenes, holdout, common } => {
            commands::predict(&checkpoint, &scenes, holdout, &common)
        }
        Command::Eval { scenes, forecasts, checkpoint, eval_at, plot, common } => {
            let source = match (forecasts, checkpoint) {
                (Some(f), None) => commands::ForecastSource::File(f),
                (None, Some(c)) => commands::ForecastSource::Checkpoint(c),
                _ => {
                    return Err(CliError::Usage(
                        "eval needs forecasts: pass --forecasts <file> or --checkpoint <model>".into(),
                    ))
                }
            };
            commands::eval(&scenes, source, eval_at, plot, &common)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

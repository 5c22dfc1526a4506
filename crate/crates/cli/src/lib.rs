//! Command-line front end for sapkit: config parsing, experiment
//! orchestration and report files.

pub mod commands;
pub mod config;
pub mod detector;
pub mod report;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::{load_config, CommandKind, ConfigError, Overrides, Toggle};

#[derive(Debug, Parser)]
#[command(name = "sapkit", version, about = "Delay-aware streaming detection experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: config `out_dir`, then $SAPKIT_OUT_DIR).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub delay_factor: Option<f64>,
    #[arg(long, global = true)]
    pub horizon: Option<i64>,
    /// Model checkpoint; replaces the configured detector.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// `name=on|off` for rtpe, tat, planner, buffer, output_buffer.
    #[arg(long = "toggle", global = true)]
    pub toggles: Vec<Toggle>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one stream and score it.
    Simulate,
    /// Train a forecaster.
    Train,
    /// Offline mAP_j, or sAP of a saved trace.
    Evaluate {
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Grid over delay factors and horizons.
    Sweep,
    /// Strategy and neck ablations.
    Ablate,
    /// Finite-difference gradient checks.
    Gradcheck,
}

impl Command {
    fn kind(&self) -> CommandKind {
        match self {
            Command::Simulate => CommandKind::Simulate,
            Command::Train => CommandKind::Train,
            Command::Evaluate { .. } => CommandKind::Evaluate,
            Command::Sweep => CommandKind::Sweep,
            Command::Ablate => CommandKind::Ablate,
            Command::Gradcheck => CommandKind::Gradcheck,
        }
    }
}

/// Execute a parsed command line; returns the summary line.
pub fn run(cli: &Cli) -> anyhow::Result<String> {
    let c = &cli.common;
    let ov = Overrides {
        seed: c.seed,
        out_dir: c.out_dir.clone(),
        delay_factor: c.delay_factor,
        horizon: c.horizon,
        checkpoint: c.checkpoint.clone(),
        toggles: c.toggles.clone(),
    };
    let kind = cli.command.kind();
    let cfg = load_config(c.config.as_deref(), &ov, kind)?;
    match &cli.command {
        Command::Simulate => commands::simulate(&cfg, ov.model_toggles()),
        Command::Train => commands::train(&cfg),
        Command::Evaluate { trace } => commands::evaluate(&cfg, ov.model_toggles(), trace.as_deref()),
        Command::Sweep => commands::sweep(&cfg, ov.model_toggles()),
        Command::Ablate => commands::ablate(&cfg, &ov),
        Command::Gradcheck => commands::gradcheck(&cfg),
    }
}

/// 2 for configuration errors, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(sapkit_core::Error::Config(_)) = cause.downcast_ref::<sapkit_core::Error>() {
            return 2;
        }
    }
    1
}

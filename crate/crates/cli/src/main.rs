//! `dinet`: generate the synthetic day/night dataset, train, evaluate and
//! gradient-check.
//!
//! Every command echoes its effective configuration into its output
//! directory. Failures print `error[<class>]: <message>` on stderr and exit
//! with a nonzero code chosen by the class.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dinet::train::TrainMode;

use crate::commands::CliError;

#[derive(Parser, Debug)]
#[command(name = "dinet", version, about = "Domain-adversarial 3D CNN action recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML or JSON run configuration; unset keys keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed for data generation, initialization and batching.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Write into a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset.
    GenerateData {
        #[command(flatten)]
        common: Common,
    },
    /// Train with domain adaptation or the source-only baseline.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by `generate-data`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Continue from a checkpoint; its configuration is used unchanged.
        #[arg(long, conflicts_with_all = ["config", "seed", "mode"])]
        resume: Option<PathBuf>,
        /// Stop (with a checkpoint) once this many steps have completed.
        #[arg(long, hide = true)]
        stop_after_steps: Option<usize>,
    },
    /// Evaluate a checkpoint on the test clips.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Compare analytic gradients with central finite differences.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Scope::Ops)]
        scope: Scope,
        /// Random configurations per operation.
        #[arg(long, default_value_t = 20)]
        configs: usize,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeArg {
    Dann,
    SourceOnly,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Dann => TrainMode::Dann,
            ModeArg::SourceOnly => TrainMode::SourceOnly,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Model,
    All,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenerateData { common } => commands::generate_data(&common),
        Command::Train {
            common,
            data,
            mode,
            resume,
            stop_after_steps,
        } => commands::train(&common, &data, mode.map(Into::into), resume.as_deref(), stop_after_steps),
        Command::Eval { common, checkpoint, data } => commands::eval(&common, &checkpoint, &data),
        Command::GradCheck {
            common,
            scope,
            configs,
            inject_fault,
        } => commands::grad_check(&common, scope, configs, inject_fault.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.class());
            ExitCode::from(e.exit_code())
        }
    }
}

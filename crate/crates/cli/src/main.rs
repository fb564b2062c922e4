//! `sigver` — batch tools for online signature verification.
//!
//! Subcommands: `extract` (corpus to feature tensors), `render` (feature
//! channels as PGM images), `lr-find` (learning-rate range scan),
//! `train`, and `eval`. Exit codes: 0 success, 1 usage or data error,
//! 2 I/O error, 3 numeric failure.

mod commands;
mod dataset;
mod error;
mod flat_config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::flat_config::FlatConfig;

#[derive(Parser)]
#[command(name = "sigver", version, about = "Online signature verification toolkit")]
struct Cli {
    /// Flat key=value file supplying defaults for any long flag.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rasterize a corpus into .psft feature tensor files.
    Extract(commands::ExtractArgs),
    /// Render one instance's feature channels as plain PGM images.
    Render(commands::RenderArgs),
    /// Scan learning rates geometrically and print the chosen rate.
    LrFind(commands::LrFindArgs),
    /// Train a classifier and write checkpoint, loss log and manifest.
    Train(commands::TrainArgs),
    /// Score a checkpoint and print a metrics JSON report.
    Eval(commands::EvalArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes, not usage errors.
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            return ExitCode::from(1);
        }
    };

    let result = FlatConfig::load(cli.config.as_deref()).and_then(|config| match cli.command {
        Command::Extract(args) => commands::extract(args, &config),
        Command::Render(args) => commands::render(args, &config),
        Command::LrFind(args) => commands::lr_find(args, &config),
        Command::Train(args) => commands::train(args, &config),
        Command::Eval(args) => commands::eval(args, &config),
    });

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum VariantArg {
    Original,
    Temporal,
    Stacked,
}

impl VariantArg {
    fn to_variant(self) -> sigver_core::psf::Variant {
        match self {
            VariantArg::Original => sigver_core::psf::Variant::Original,
            VariantArg::Temporal => sigver_core::psf::Variant::Temporal,
            VariantArg::Stacked => sigver_core::psf::Variant::Stacked,
        }
    }
}

impl std::str::FromStr for VariantArg {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "original" => Ok(VariantArg::Original),
            "temporal" => Ok(VariantArg::Temporal),
            "stacked" => Ok(VariantArg::Stacked),
            other => Err(format!("unknown variant {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum ModelArg {
    Cnn,
    Rnn,
    CnnLstm,
}

impl ModelArg {
    fn to_kind(self) -> sigver_core::models::ModelKind {
        match self {
            ModelArg::Cnn => sigver_core::models::ModelKind::CnnFixed,
            ModelArg::Rnn => sigver_core::models::ModelKind::RnnPoints,
            ModelArg::CnnLstm => sigver_core::models::ModelKind::CnnLstm,
        }
    }
}

impl std::str::FromStr for ModelArg {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cnn" => Ok(ModelArg::Cnn),
            "rnn" => Ok(ModelArg::Rnn),
            "cnn-lstm" => Ok(ModelArg::CnnLstm),
            other => Err(format!("unknown model {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum SplitModeArg {
    Instance,
    Writer,
}

impl std::str::FromStr for SplitModeArg {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "instance" => Ok(SplitModeArg::Instance),
            "writer" => Ok(SplitModeArg::Writer),
            other => Err(format!("unknown split mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum LrPickArg {
    MinOverTen,
    Min,
}

impl LrPickArg {
    fn to_pick(self) -> sigver_core::pipeline::LrPick {
        match self {
            LrPickArg::MinOverTen => sigver_core::pipeline::LrPick::MinOverTen,
            LrPickArg::Min => sigver_core::pipeline::LrPick::Min,
        }
    }
}

impl std::str::FromStr for LrPickArg {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "min-over-ten" => Ok(LrPickArg::MinOverTen),
            "min" => Ok(LrPickArg::Min),
            other => Err(format!("unknown lr pick rule {other:?}")),
        }
    }
}

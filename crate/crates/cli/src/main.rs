//! `ctt`: data generation, training, ablations, evaluation and plots.

mod ablate;
mod args;
mod eval;
mod fsutil;
mod generate;
mod plot;
mod svg;
mod train;

use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use args::{split_overrides, AblateArgs, EvalArgs, GenerateArgs, PlotArgs, TrainArgs};

#[derive(Parser, Debug)]
#[command(name = "ctt", version, about = "Cross-teacher semi-supervised segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic shapes dataset to a directory.
    GenerateData(GenerateArgs),
    /// Train one configuration. Extra `--key=value` flags override config keys.
    Train(TrainArgs),
    /// Run a grid of configurations and write a summary table.
    Ablate(AblateArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Draw SVG charts from metrics logs.
    Plot(PlotArgs),
}

/// Errors that map onto process exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Core(ctt_core::Error),
    Other(anyhow::Error),
}

impl From<ctt_core::Error> for Failure {
    fn from(e: ctt_core::Error) -> Self {
        Failure::Core(e)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Failure::Usage(msg.into())
    }

    fn exit_code(&self) -> u8 {
        use ctt_core::Error as E;
        match self {
            Failure::Usage(_) => 2,
            Failure::Core(E::Config { .. }) => 3,
            Failure::Core(E::Integrity { .. }) => 4,
            Failure::Core(E::Divergence { .. }) => 5,
            Failure::Core(_) | Failure::Other(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "{m}"),
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Other(e) => write!(f, "{e:#}"),
        }
    }
}

pub type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let raw: Vec<String> = std::env::args().collect();
    let (argv, overrides) = split_overrides(&Cli::command(), raw);
    let matches = match Cli::command().try_get_matches_from(&argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    let takes_overrides = matches!(cli.command, Command::Train(_) | Command::Ablate(_));
    if !takes_overrides && !overrides.is_empty() {
        eprintln!("usage error: unexpected arguments {}", overrides.join(" "));
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::GenerateData(a) => generate::run(a),
        Command::Train(a) => train::run(a, &overrides),
        Command::Ablate(a) => ablate::run(a, &overrides),
        Command::Eval(a) => eval::run(a),
        Command::Plot(a) => plot::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}

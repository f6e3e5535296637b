//! `psvit` command-line tool.
//!
//! Exit codes: 0 success, 1 validation failure (bad flags, configuration or
//! dataset), 2 runtime or audit failure.

mod args;
mod commands;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub const VALIDATION: u8 = 1;
    pub const RUNTIME: u8 = 2;

    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            code: Self::VALIDATION,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: Self::RUNTIME,
            message: message.into(),
        }
    }

    pub fn audit(message: impl Into<String>) -> Self {
        Self::runtime(message)
    }
}

impl From<psvit::Error> for CliError {
    fn from(e: psvit::Error) -> Self {
        use psvit::Error as E;
        match e {
            E::Config(_) | E::Dataset(_) | E::Format(_) => Self::validation(e.to_string()),
            _ => Self::runtime(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(CliError::VALIDATION),
            };
        }
    };
    let result = match &cli.command {
        Command::Summary(a) => commands::summary(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Viz(a) => commands::viz(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

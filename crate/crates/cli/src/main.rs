//! `trajdiff`: the command-line pipeline.
//!
//! Every command prints exactly one JSON line on stdout (a summary, or an
//! error object) and exits 0 on success, 2 on usage errors, 3 on data errors
//! and 4 on numeric failures.

mod commands;

use std::process::ExitCode;

use clap::Parser;
use serde_json::json;

use commands::{Cli, CliError};

pub const BUILD_ID: &str = env!("TRAJDIFF_BUILD_ID");

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            println!(
                "{}",
                json!({ "ok": false, "error": { "code": "usage", "message": first } })
            );
            return ExitCode::from(2);
        }
    };
    let name = cli.command.name();
    match commands::run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let (code, exit) = match &e {
                CliError::Usage(_) => ("usage", 2),
                CliError::Data(_) => ("data", 3),
                CliError::Numeric(_) => ("numeric", 4),
            };
            println!(
                "{}",
                json!({ "command": name, "ok": false, "error": { "code": code, "message": e.to_string() } })
            );
            ExitCode::from(exit)
        }
    }
}

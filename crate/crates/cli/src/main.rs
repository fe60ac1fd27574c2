//! `sta`: command-line front end for the anticipation toolkit.

mod args;
mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;
use serde_json::json;
use sta_core::StaError;

use crate::args::Cli;

/// Machine-readable failure record written to stderr.
fn error_record(err: &anyhow::Error) -> serde_json::Value {
    match err.downcast_ref::<StaError>() {
        Some(StaError::Parse { file, line, field, message }) => {
            json!({"error": {"kind": "parse", "file": file, "line": line, "field": field, "message": message}})
        }
        Some(StaError::InvalidParameter { name, reason }) => {
            json!({"error": {"kind": "invalid_parameter", "flag": name, "message": reason}})
        }
        Some(e) => json!({"error": {"kind": e.kind(), "message": e.to_string()}}),
        None => json!({"error": {"kind": "other", "message": format!("{err:#}")}}),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("STA_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // help and version requests
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rec = json!({"error": {"kind": "usage", "message": e.to_string().trim_end()}});
            eprintln!("{rec}");
            return ExitCode::from(2);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("{}", error_record(&e));
            ExitCode::FAILURE
        }
    }
}

//! `orthocare`: data generation, training, evaluation, interpretation, probing, and
//! math verification from the command line.
//!
//! Exit codes: 0 on success, 1 on invalid flags, config, or inputs, 2 on internal
//! failures (including failed verification suites). Errors are printed to stderr as one
//! line, `error[validation]: <kind>: <message>` or `error[internal]: <kind>: <message>`.

mod args;
mod artifacts;
mod commands;

use std::ffi::OsString;

use clap::error::ErrorKind;
use clap::Parser;

use args::Cli;
use commands::{dispatch, Failure};

fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn run(argv: impl IntoIterator<Item = OsString>) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            let detail = first.strip_prefix("error: ").unwrap_or(first);
            eprintln!("error[validation]: usage: {}", one_line(detail));
            return 1;
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error[validation]: usage: {}", one_line(&msg));
            1
        }
        Err(Failure::Checks(msg)) => {
            eprintln!("error[internal]: verification: {}", one_line(&msg));
            2
        }
        Err(Failure::Core(e)) => {
            let class = if e.is_validation() { "validation" } else { "internal" };
            let text = e.to_string();
            let kind = e.kind();
            let body = text.strip_prefix(&format!("{kind} error: ")).unwrap_or(&text);
            eprintln!("error[{class}]: {kind}: {}", one_line(body));
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn main() {
    std::process::exit(run(std::env::args_os()));
}

//! `fourplane` command-line tool.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error
//! (missing or corrupt inputs, locked run directory), 4 numeric failure.
//! Seeded commands are deterministic for a fixed thread count; all numeric
//! work here is single-threaded.

mod args;
mod commands;
mod config;
mod error;
mod image;
mod report;
mod rundir;

use clap::Parser;

fn main() {
    let cli = args::Cli::parse();
    if let Err(e) = commands::run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

use std::process::ExitCode;

use clap::Parser;
use specsim::cli::{execute, Cli};

fn main() -> anyhow::Result<ExitCode> {
    let cli = Cli::parse();
    Ok(if execute(&cli)? { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

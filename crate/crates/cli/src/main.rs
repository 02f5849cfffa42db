//! `ordseg`: metrics, losses and toy training for ordinal segmentation.
//!
//! Exit codes: 0 on success, 1 when inputs or parameters are rejected,
//! 2 for usage errors.

mod args;
mod run;

use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;

use args::{Cli, Command};
use run::{execute, manifest_for, replayed_command, Failure};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    let mut command = match command {
        Command::Replay(mut a) => {
            a.manifest = std::path::absolute(&a.manifest)?;
            a.out_dir = a.out_dir.map(std::path::absolute).transpose()?;
            replayed_command(&a)?
        }
        other => other,
    };
    command.absolutize()?;
    let argv: Vec<String> = std::env::args().collect();
    let start = Instant::now();
    let outcome = execute(&command)?;
    let seconds = start.elapsed().as_secs_f64();
    if let Some(path) = &outcome.manifest {
        manifest_for(&command, &outcome, &argv, seconds)?.write(path)?;
    }
    Ok(())
}

mod args;
mod commands;
mod config;
mod output;

use std::process::ExitCode;

use anyhow::Result;
use clap::Parser;

use args::{Cli, Command};
use commands::NotConverged;

const EXIT_INPUT: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_NOT_CONVERGED: u8 = 4;

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<NotConverged>().is_some() {
        return EXIT_NOT_CONVERGED;
    }
    match err.downcast_ref::<stochint::Error>() {
        Some(e) if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_INPUT,
    }
}

#[cfg(feature = "parallel")]
fn init_threads(requested: Option<usize>) -> Result<()> {
    use anyhow::Context;
    let n = match requested {
        Some(n) => n,
        None => match std::env::var("STOCHINT_THREADS") {
            Ok(v) => v.trim().parse().context("STOCHINT_THREADS must be a non-negative integer")?,
            Err(_) => 0,
        },
    };
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

#[cfg(not(feature = "parallel"))]
fn init_threads(_requested: Option<usize>) -> Result<()> {
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    init_threads(cli.threads)?;
    match &cli.command {
        Command::Fit(a) => commands::fit(a),
        Command::Optimize(a) => commands::optimize(a),
        Command::Adversarial(a) => commands::adversarial(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Diverge(a) => commands::diverge(a),
        Command::Bound(a) => commands::bound(a),
    }
}

fn main() -> ExitCode {
    let argv = match config::expand(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_INPUT);
        }
    };
    let cli = Cli::parse_from(argv);
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error in {}: {e:#}", cli.command.name());
            ExitCode::from(exit_code(&e))
        }
    }
}

//! Command-line front-end: simulate, filter, smooth, estimate and check
//! over JSON configurations and CSV data.

mod commands;
mod error;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Invocation;

#[derive(Parser, Debug)]
#[command(name = "bellman", version, about = "Bellman filtering, smoothing and estimation for state-space models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Paths {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// CSV observations; overrides `io.data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output file; overrides `io.out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use the iterative update even where the closed-form Kalman update applies.
    #[arg(long)]
    force_newton: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw states and observations from the configured model.
    Simulate(Paths),
    /// Run the filter and write per-step moments.
    Filter(Paths),
    /// Run the filter and the backward smoother.
    Smooth(Paths),
    /// Estimate the configured parameters by maximizing the filter likelihood.
    Estimate(Paths),
    /// Run the built-in invariant checks on the configured model.
    Check(Paths),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (run, paths): (fn(&Invocation) -> error::CliResult<()>, Paths) = match cli.command {
        Command::Simulate(p) => (commands::simulate, p),
        Command::Filter(p) => (commands::filter, p),
        Command::Smooth(p) => (commands::smooth, p),
        Command::Estimate(p) => (commands::estimate_cmd, p),
        Command::Check(p) => (commands::check, p),
    };
    let inv = Invocation {
        config: paths.config,
        data: paths.data,
        out: paths.out,
        force_newton: paths.force_newton,
    };
    match run(&inv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("exit code {}", e.exit_code());
            eprintln!("bellman: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! Batch harness: every library pipeline is a subcommand driven by a
//! versioned JSON config file.
//!
//! Contract: exit 0 on pass (or an expected negative-control failure), 2 when
//! a checked condition fails, 1 on usage, config, or I/O errors.  Each run
//! writes `report.json` — embedding the fully resolved config and seed — plus
//! CSV data files into the output directory; re-running an embedded config
//! reproduces the artifacts byte for byte.

mod commands;
mod config;
mod report;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "ivmqr", version, about = "experiment harness for vector quantile treatment models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args)]
struct RunArgs {
    /// Path to the JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; the IVMQR_OUT environment variable wins over this.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Caps the worker-thread pool.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic sample and write it as CSV.
    Simulate(RunArgs),
    /// Audit the pushforward identity over a family of probe sets.
    VerifyImplication(RunArgs),
    /// Evaluate the quantitative overlap condition on an eigenvalue band.
    CheckIdentification(RunArgs),
    /// Tabulate linearization gaps over tangent directions and radii.
    Linearize(RunArgs),
    /// Probe derivative rank and local residual growth.
    ProbeRank(RunArgs),
    /// Fit a parametric map family to conditional densities.
    Fit(RunArgs),
    /// Run a perturbed-start recovery experiment.
    Recover(RunArgs),
    /// Demonstrate a scalar rank-similarity violation.
    DemoRankViolation(RunArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = match cli.command {
        Command::Simulate(args) => (commands::Kind::Simulate, args),
        Command::VerifyImplication(args) => (commands::Kind::VerifyImplication, args),
        Command::CheckIdentification(args) => (commands::Kind::CheckIdentification, args),
        Command::Linearize(args) => (commands::Kind::Linearize, args),
        Command::ProbeRank(args) => (commands::Kind::ProbeRank, args),
        Command::Fit(args) => (commands::Kind::Fit, args),
        Command::Recover(args) => (commands::Kind::Recover, args),
        Command::DemoRankViolation(args) => (commands::Kind::DemoRankViolation, args),
    };
    match commands::run(kind, &args) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(1)
        }
    }
}

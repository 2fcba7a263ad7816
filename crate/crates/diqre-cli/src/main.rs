//! `diqre`: the randomness-expansion pipeline as subcommands over files.
//!
//! Exit codes: 0 success, 2 parameter/format/i/o error, 3 infeasible plan, 4 protocol
//! failure (no certificate), 5 audit failure.

mod config;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::stages::{Ctx, Failure};

#[derive(Parser)]
#[command(name = "diqre", version, about = "Device-independent quantum randomness expansion pipeline")]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(short, long, global = true, default_value = "diqre.toml")]
    config: PathBuf,
    /// Override a configuration key, e.g. `--set protocol.q=0.5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Predict the device behavior and sample a training counts file.
    Simulate,
    /// MLE-project the counts, optimize the PEF over the α grid and rescale it to a QEF.
    Train,
    /// Appoint the trial budget N and success threshold h.
    Plan,
    /// Execute the spot-checking protocol; certify on success.
    Run,
    /// Hash the certified outputs with the Toeplitz extractor.
    Extract,
    /// Write the expansion curve CSV, or with --dry-run the plan's ledger arithmetic.
    Report {
        #[arg(long)]
        dry_run: bool,
        /// Trial count at which to evaluate consumption in a dry run (default N).
        #[arg(long, requires = "dry_run")]
        stop: Option<f64>,
    },
    /// Re-verify factor feasibility, grid certificates and extractor outputs.
    Audit,
}

fn execute(cli: &Cli) -> Result<serde_json::Value, Failure> {
    let (cfg, base) = config::load(&cli.config, &cli.overrides)?;
    let ctx = Ctx { cfg, base };
    match &cli.command {
        Command::Simulate => stages::simulate(&ctx),
        Command::Train => stages::train(&ctx),
        Command::Plan => stages::plan(&ctx),
        Command::Run => stages::run(&ctx),
        Command::Extract => stages::extract(&ctx),
        Command::Report { dry_run: true, stop } => stages::dry_run(&ctx, *stop),
        Command::Report { dry_run: false, .. } => stages::report(&ctx),
        Command::Audit => stages::audit(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}

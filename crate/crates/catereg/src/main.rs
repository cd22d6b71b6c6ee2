//! Command-line front end for the CATE estimation library.
//!
//! ## Purpose
//!
//! Three subcommands: `simulate` runs a Monte Carlo study from a TOML
//! config, `estimate` fits CATE curves on an external CSV dataset, and
//! `kernel-check` verifies the moment conditions of a higher-order kernel.
//!
//! ## Invariants
//!
//! - Exit codes: 0 success, 2 configuration error (including usage errors),
//!   3 data error, 4 numeric degeneracy beyond the configured threshold.
//! - Errors print as a single machine-parsable `error: ...` line on stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use catereg::cli::{cmd_estimate, cmd_kernel_check, cmd_simulate, CliFailure};

#[derive(Parser)]
#[command(
    name = "catereg",
    version,
    about = "Two-step kernel CATE estimation: Monte Carlo harness, dataset fitting, kernel checks"
)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte Carlo simulation described by a TOML config
    Simulate {
        /// Path to the TOML configuration
        #[arg(long)]
        config: PathBuf,
        /// Directory for report.csv and report.txt
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Estimate CATE curves on a CSV dataset described by a TOML config
    Estimate {
        /// Path to the TOML configuration
        #[arg(long)]
        config: PathBuf,
        /// Directory for curves.csv and optional plot files
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Print a kernel's moment table and verify each condition
    KernelCheck {
        /// Kernel order (positive even integer)
        #[arg(long)]
        order: usize,
        /// Kernel family: "gaussian" or "compact"
        #[arg(long, default_value = "gaussian")]
        family: String,
    },
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result: Result<i32, CliFailure> = match args.command {
        Command::Simulate { config, out_dir } => cmd_simulate(&config, &out_dir),
        Command::Estimate { config, out_dir } => cmd_estimate(&config, &out_dir),
        Command::KernelCheck { order, family } => cmd_kernel_check(order, &family),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(failure) => {
            eprintln!("{failure}");
            ExitCode::from(failure.code as u8)
        }
    }
}

//! The `simulate` subcommand: run the replication harness from a config.
//!
//! ## Purpose
//!
//! Loads a `[simulate]` TOML config, runs [`crate::simulation::run_replications`],
//! and writes `report.csv` (long format) plus `report.txt` (aligned table)
//! into the output directory. Dropped-replication counts are echoed on
//! stdout; exceeding the configured `max_dropped` turns the run into exit
//! code 4 after the outputs are written.
//!
//! ## Invariants
//!
//! - Outputs are written before the dropped-threshold verdict, so a
//!   degenerate run still leaves its evidence on disk.
//! - Identical config files produce byte-identical outputs.

use std::path::Path;

use crate::cli::{config, emit_warnings, write_output, CliFailure, EXIT_DEGENERATE, EXIT_OK};
use crate::simulation::run_replications;

/// Run a simulation config and write its report files into `out_dir`.
/// Returns the process exit code.
pub fn cmd_simulate(config_path: &Path, out_dir: &Path) -> Result<i32, CliFailure> {
    let job = config::load_simulate(config_path)?;
    emit_warnings(&job.warnings);

    let report = run_replications(&job.config).map_err(|e| {
        CliFailure::degenerate(format!("simulation failed: {e}"))
    })?;

    let csv_path = write_output(out_dir, "report.csv", &report.to_csv_string())?;
    let txt_path = write_output(out_dir, "report.txt", &report.to_text_table())?;
    println!("wrote {}", csv_path.display());
    println!("wrote {}", txt_path.display());

    let mut any_dropped = false;
    for summary in report.summaries() {
        if summary.dropped > 0 {
            any_dropped = true;
            let detail = summary
                .first_error
                .as_deref()
                .map(|e| format!(" (first error: {e})"))
                .unwrap_or_default();
            println!(
                "dropped replications: {} = {}{detail}",
                summary.estimator, summary.dropped
            );
        }
    }
    if !any_dropped {
        println!("dropped replications: none");
    }

    let total = report.total_dropped();
    if total > job.max_dropped {
        eprintln!(
            "error: {total} dropped replications exceed the allowed max_dropped = {}",
            job.max_dropped
        );
        return Ok(EXIT_DEGENERATE);
    }
    Ok(EXIT_OK)
}

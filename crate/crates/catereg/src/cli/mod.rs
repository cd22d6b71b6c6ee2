//! Command-line front end: configs, subcommands, and file emission.
//!
//! ## Purpose
//!
//! Wires the library into three subcommands: `simulate` runs the Monte
//! Carlo harness from a TOML config and writes `report.csv`/`report.txt`,
//! `estimate` fits CATE curves on an external CSV dataset, and
//! `kernel-check` prints a kernel moment verification table.
//!
//! ## Design notes
//!
//! - Every failure folds into a [`CliFailure`]: an exit code plus a single
//!   line of text (newlines flattened) so scripts can parse stderr.
//! - Exit codes: 0 success, 2 config error, 3 data error, 4 numeric
//!   degeneracy above the configured threshold.
//! - Commands return their exit code; printing happens here and in the
//!   binary, keeping the per-command logic testable.
//!
//! ## Invariants
//!
//! - Outputs are idempotent: identical config + seed produce byte-identical
//!   files.
//! - Warnings go to stderr; results and file paths go to stdout.
//!
//! ## Non-goals
//!
//! Interactive operation, image rendering, and network access.

use std::fmt;
use std::path::Path;

pub mod config;
pub mod estimate;
pub mod kernel_check;
pub mod simulate;

pub use config::{load_estimate, load_simulate, EstimateJob, GridSpec, SimulateJob};
pub use estimate::cmd_estimate;
pub use kernel_check::cmd_kernel_check;
pub use simulate::cmd_simulate;

/// Successful run.
pub const EXIT_OK: i32 = 0;
/// Config file missing, unparseable, or inconsistent.
pub const EXIT_CONFIG: i32 = 2;
/// Data CSV missing, unparseable, or violating role constraints.
pub const EXIT_DATA: i32 = 3;
/// Numeric degeneracy exceeded the configured threshold.
pub const EXIT_DEGENERATE: i32 = 4;

/// A terminal failure: an exit code and one line of text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliFailure {
    pub code: i32,
    pub message: String,
}

impl CliFailure {
    pub fn config(message: impl Into<String>) -> Self {
        CliFailure { code: EXIT_CONFIG, message: flatten_line(&message.into()) }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliFailure { code: EXIT_DATA, message: flatten_line(&message.into()) }
    }

    pub fn degenerate(message: impl Into<String>) -> Self {
        CliFailure { code: EXIT_DEGENERATE, message: flatten_line(&message.into()) }
    }
}

impl fmt::Display for CliFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error: {}", self.message)
    }
}

/// Collapse a message onto one line for machine-parsable stderr.
fn flatten_line(s: &str) -> String {
    s.split(['\n', '\r']).map(str::trim).filter(|p| !p.is_empty()).collect::<Vec<_>>().join(" ")
}

/// Write `contents` to `dir/name`, mapping IO errors to data failures.
fn write_output(dir: &Path, name: &str, contents: &str) -> Result<std::path::PathBuf, CliFailure> {
    std::fs::create_dir_all(dir).map_err(|e| {
        CliFailure::data(format!("cannot create output directory `{}`: {e}", dir.display()))
    })?;
    let path = dir.join(name);
    std::fs::write(&path, contents)
        .map_err(|e| CliFailure::data(format!("cannot write `{}`: {e}", path.display())))?;
    Ok(path)
}

/// Print warnings one per line on stderr.
fn emit_warnings(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {}", flatten_line(w));
    }
}

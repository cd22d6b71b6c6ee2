//! The `kernel-check` subcommand: verify moment conditions of a kernel.
//!
//! ## Purpose
//!
//! Builds the requested higher-order kernel and prints one line per moment
//! 0..=order with its numerically integrated value and a pass/fail verdict:
//! the mass integrates to one, every intermediate moment vanishes, and the
//! order moment is bounded away from zero. Exit code 0 only when every row
//! passes.
//!
//! ## Invariants
//!
//! - An odd or zero order is a usage error (exit 2), not a failed check:
//!   the construction only defines even orders.

use crate::cli::config::parse_family;
use crate::cli::{CliFailure, EXIT_DEGENERATE, EXIT_OK};
use crate::kernels::{kernel_l2_norm_sq, make_kernel, moment_report};

/// Run the moment suite for one kernel; returns the process exit code.
pub fn cmd_kernel_check(order: usize, family: &str) -> Result<i32, CliFailure> {
    let family = parse_family(Some(family))?;
    if order == 0 || !order.is_multiple_of(2) {
        return Err(CliFailure::config(format!(
            "kernel order must be a positive even integer, got {order}"
        )));
    }
    let kernel = make_kernel(family, order)
        .map_err(|e| CliFailure::config(format!("cannot construct kernel: {e}")))?;
    let rows = moment_report(&kernel)
        .map_err(|e| CliFailure::degenerate(format!("moment integration failed: {e}")))?;

    println!("kernel family={family} order={order}");
    let mut all_pass = true;
    for row in &rows {
        all_pass &= row.pass;
        println!(
            "moment {:>2}: value {:+.9e}  target {:<7}  {}",
            row.moment,
            row.value,
            row.target,
            if row.pass { "pass" } else { "FAIL" }
        );
    }
    match kernel_l2_norm_sq(&kernel) {
        Ok(norm) => println!("l2 norm squared: {norm:.9e}"),
        Err(e) => eprintln!("warning: l2 norm unavailable: {e}"),
    }
    Ok(if all_pass { EXIT_OK } else { EXIT_DEGENERATE })
}

//! The `estimate` subcommand: CATE curves on an external CSV dataset.
//!
//! ## Purpose
//!
//! Reads a header-full numeric CSV, maps the configured column roles onto a
//! [`SampleSet`], resolves the bandwidth plan against the observed sample
//! size, and runs each requested estimator through the shared second step.
//! Writes `curves.csv` (long format, one row per estimator × grid point) and
//! optional per-estimator plot files.
//!
//! ## Design notes
//!
//! - Estimators that need the data-generating oracle (known true effect or
//!   true propensity) are rejected at config load; everything else mirrors
//!   the simulation harness wiring exactly, so a CLI run with known
//!   directions reproduces the in-process `srcate` call bit for bit.
//! - A degenerate second-step point keeps its row with an empty value
//!   rather than failing the run; a stage-one failure empties the whole
//!   estimator column. Both are warned on stderr. Only when every requested
//!   cell is missing does the run exit with code 4.
//! - Grid default: 40 interior quantile points of scalar X₁ (probabilities
//!   j/(q+1), linearly interpolated order statistics).
//!
//! ## Invariants
//!
//! - Data errors name the 1-based data row (and column) that caused them.
//! - The treatment column must be exactly 0 or 1; anything else is a data
//!   error naming the row.

use std::path::Path;

use ndarray::{Array1, Array2};

use crate::asymptotics::format_sig9;
use crate::cli::config::{gate_violations, DirectionsRequest, EstimateJob, GridSpec};
use crate::cli::{emit_warnings, write_output, CliFailure, EXIT_DEGENERATE, EXIT_OK};
use crate::error::CateError;
use crate::estimators::{
    nrcate_pseudo, second_step_values, srcate_pseudo, EstimatorId, PseudoOutcome,
};
use crate::firststage::{
    estimate_directions, fit_outcome_ls, fit_propensity_logistic_with_clip,
    fit_propensity_nonparametric_with_clip, fit_propensity_single_index_with_clip, BasisSpec,
    BasisTerm, DirectionMethod, DirectionSet, DirectionSource, DEFAULT_CLIP,
};
use crate::kernels::{make_kernel, make_product_kernel};
use crate::simulation::BandwidthPlan;
use crate::smoothing::{SampleSet, SmoothOptions};

/// Run an estimate config and write curve files into `out_dir`. Returns the
/// process exit code.
pub fn cmd_estimate(config_path: &Path, out_dir: &Path) -> Result<i32, CliFailure> {
    let job = crate::cli::config::load_estimate(config_path)?;
    let data = read_samples(&job)?;
    let (plan, violations) = job.plan.resolve(data.n(), job.k(), job.p(), job.r_max())?;
    let warnings = gate_violations(violations, job.override_rules)?;
    emit_warnings(&warnings);
    let grid = build_grid(&job, &data)?;

    let mut results: Vec<(EstimatorId, Vec<Option<f64>>)> = Vec::new();
    let mut cells_total = 0usize;
    let mut cells_ok = 0usize;
    for &id in &job.estimators {
        let column = match estimator_values(id, &data, &job, &plan, &grid) {
            Ok(values) => values
                .into_iter()
                .enumerate()
                .map(|(gi, r)| match r {
                    Ok(v) => Some(v),
                    Err(e) => {
                        eprintln!(
                            "warning: {id}: grid point {} ({}) left empty: {e}",
                            gi + 1,
                            format_point(&grid[gi])
                        );
                        None
                    }
                })
                .collect(),
            Err(e) => {
                eprintln!("warning: {id}: stage one failed, column left empty: {e}");
                vec![None; grid.len()]
            }
        };
        cells_total += column.len();
        cells_ok += column.iter().flatten().count();
        results.push((id, column));
    }

    let csv_path = write_output(out_dir, "curves.csv", &curves_csv(&grid, &results))?;
    println!("wrote {}", csv_path.display());
    if job.plot_data {
        for (id, column) in &results {
            let name = format!("plot_{}.csv", id.to_string().to_ascii_lowercase());
            let path = write_output(out_dir, &name, &plot_csv(&grid, column))?;
            println!("wrote {}", path.display());
        }
    }

    if cells_ok == 0 && cells_total > 0 {
        eprintln!("error: every grid point failed for every estimator");
        return Ok(EXIT_DEGENERATE);
    }
    Ok(EXIT_OK)
}

/// Read the CSV into a sample set according to the job's column roles.
fn read_samples(job: &EstimateJob) -> Result<SampleSet, CliFailure> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(&job.csv)
        .map_err(|e| CliFailure::data(format!("cannot read `{}`: {e}", job.csv.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| CliFailure::data(format!("cannot read CSV header: {e}")))?
        .clone();
    let find = |name: &str| -> Result<usize, CliFailure> {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            CliFailure::config(format!(
                "CSV has no column `{name}`; headers are [{}]",
                headers.iter().collect::<Vec<_>>().join(", ")
            ))
        })
    };
    let y_col = find(&job.roles.y)?;
    let d_col = find(&job.roles.d)?;
    let x_cols = job.roles.x.iter().map(|n| find(n)).collect::<Result<Vec<_>, _>>()?;
    // Validated at load: every x1 name occurs in x.
    let x1_idx: Vec<usize> = job
        .roles
        .x1
        .iter()
        .map(|n| job.roles.x.iter().position(|m| m == n).expect("x1 is a subset of x"))
        .collect();

    let mut y = Vec::new();
    let mut d = Vec::new();
    let mut xs: Vec<f64> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record =
            record.map_err(|e| CliFailure::data(format!("data row {row}: {e}")))?;
        let field = |col: usize, name: &str| -> Result<f64, CliFailure> {
            let raw = record.get(col).ok_or_else(|| {
                CliFailure::data(format!("data row {row}: missing column `{name}`"))
            })?;
            raw.parse::<f64>().map_err(|_| {
                CliFailure::data(format!(
                    "data row {row}, column `{name}`: cannot parse `{raw}` as a number"
                ))
            })
        };
        y.push(field(y_col, &job.roles.y)?);
        let d_raw = field(d_col, &job.roles.d)?;
        if d_raw == 0.0 {
            d.push(0u8);
        } else if d_raw == 1.0 {
            d.push(1u8);
        } else {
            return Err(CliFailure::data(format!(
                "data row {row}: treatment column `{}` must be 0 or 1, got {d_raw}",
                job.roles.d
            )));
        }
        for (&col, name) in x_cols.iter().zip(&job.roles.x) {
            xs.push(field(col, name)?);
        }
    }
    let n = y.len();
    if n == 0 {
        return Err(CliFailure::data(format!(
            "`{}` has no data rows",
            job.csv.display()
        )));
    }
    let x = Array2::from_shape_vec((n, job.p()), xs).expect("row-major fill matches shape");
    SampleSet::new(x, Array1::from_vec(y), d, x1_idx)
        .map_err(|e| CliFailure::data(e.to_string()))
}

/// Materialize the grid request: explicit points (dimension-checked) or
/// interior quantiles of scalar X₁.
fn build_grid(job: &EstimateJob, data: &SampleSet) -> Result<Vec<Vec<f64>>, CliFailure> {
    match &job.grid {
        GridSpec::Points(rows) => {
            for (i, row) in rows.iter().enumerate() {
                if row.len() != data.k() {
                    return Err(CliFailure::config(format!(
                        "grid point {} has dimension {}, but x1 lists {} columns",
                        i + 1,
                        row.len(),
                        data.k()
                    )));
                }
            }
            Ok(rows.clone())
        }
        GridSpec::Quantiles(q) => {
            if data.k() != 1 {
                return Err(CliFailure::config(
                    "quantile grids need a scalar x1; give explicit grid `points` instead",
                ));
            }
            let mut values: Vec<f64> =
                (0..data.n()).map(|i| data.x()[(i, data.x1_idx()[0])]).collect();
            values.sort_by(|a, b| a.partial_cmp(b).expect("finite by construction"));
            Ok(interior_quantiles(&values, *q).into_iter().map(|v| vec![v]).collect())
        }
    }
}

/// Evenly spaced interior quantiles of sorted values: probabilities
/// j/(q+1) for j = 1..=q, linearly interpolated order statistics.
fn interior_quantiles(sorted: &[f64], q: usize) -> Vec<f64> {
    let n = sorted.len();
    (1..=q)
        .map(|j| {
            let prob = j as f64 / (q + 1) as f64;
            let pos = prob * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            let frac = pos - lo as f64;
            sorted[lo] + frac * (sorted[hi] - sorted[lo])
        })
        .collect()
}

/// Per-point second-step values for one estimator, mirroring the harness
/// wiring for data without an oracle.
fn estimator_values(
    id: EstimatorId,
    data: &SampleSet,
    job: &EstimateJob,
    plan: &BandwidthPlan,
    grid: &[Vec<f64>],
) -> Result<Vec<Result<f64, CateError>>, CateError> {
    let clip = job.clip.unwrap_or(DEFAULT_CLIP);
    let options = SmoothOptions { leave_one_out: job.leave_one_out };
    let pseudo: Vec<f64> = match id {
        EstimatorId::Prcate => {
            let (basis1, basis0) = job.bases.as_ref().expect("validated at config load");
            let fit1 = fit_outcome_ls(data, 1, basis1)?;
            let fit0 = fit_outcome_ls(data, 0, basis0)?;
            let m1 = (0..data.n()).map(|i| fit1.eval(data.row(i))).collect();
            let m0 = (0..data.n()).map(|i| fit0.eval(data.row(i))).collect();
            PseudoOutcome::regression(m1, m0, data.n())?.second_step_input()
        }
        EstimatorId::Nrcate => nrcate_pseudo(data, plan, options)?.second_step_input(),
        EstimatorId::Srcate => {
            let directions = directions_for(job, data)?;
            srcate_pseudo(data, &directions, plan, options)?.second_step_input()
        }
        EstimatorId::Pcate => {
            let basis = match &job.propensity_basis {
                Some(b) => b.clone(),
                None => linear_basis(data.p())?,
            };
            let prop = fit_propensity_logistic_with_clip(data, &basis, clip)?;
            PseudoOutcome::ipw(data, &prop)?.second_step_input()
        }
        EstimatorId::Scate => {
            let kernel = make_kernel(plan.family(), plan.s4())?;
            let prop = fit_propensity_single_index_with_clip(data, plan.h4(), &kernel, clip)?;
            PseudoOutcome::ipw(data, &prop)?.second_step_input()
        }
        EstimatorId::Ncate => {
            let kernel = make_product_kernel(plan.family(), plan.s2(), data.p())?;
            let prop = fit_propensity_nonparametric_with_clip(data, plan.h2(), &kernel, clip)?;
            PseudoOutcome::ipw(data, &prop)?.second_step_input()
        }
        EstimatorId::Orcate | EstimatorId::Ocate => {
            unreachable!("oracle estimators are rejected at config load")
        }
    };
    let k1 = make_product_kernel(plan.family(), plan.s1(), data.k())?;
    second_step_values(&pseudo, data, grid, plan.h1(), &k1)
}

/// Intercept-plus-coordinates logistic basis, the default when none is
/// configured.
fn linear_basis(p: usize) -> Result<BasisSpec, CateError> {
    let mut terms = vec![BasisTerm::Constant];
    terms.extend((0..p).map(BasisTerm::Coord));
    BasisSpec::new(terms)
}

fn directions_for(job: &EstimateJob, data: &SampleSet) -> Result<DirectionSet, CateError> {
    match job.directions.as_ref().expect("validated at config load") {
        DirectionsRequest::Known { beta1, beta0 } => {
            DirectionSet::known(beta1.clone(), beta0.clone())
        }
        DirectionsRequest::IndexLs { r1, r0 } => {
            let beta1 = estimate_directions(data, 1, DirectionMethod::IndexLs { r: *r1 })?;
            let beta0 = estimate_directions(data, 0, DirectionMethod::IndexLs { r: *r0 })?;
            DirectionSet::new(beta1, beta0, DirectionSource::Estimated)
        }
    }
}

fn format_point(point: &[f64]) -> String {
    point.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(";")
}

fn format_point_sig9(point: &[f64]) -> String {
    point.iter().map(|&v| format_sig9(v)).collect::<Vec<_>>().join(";")
}

/// Long-format curve CSV: estimator, x1 (";"-joined when k > 1), tau_hat
/// (empty when the point was degenerate).
fn curves_csv(grid: &[Vec<f64>], results: &[(EstimatorId, Vec<Option<f64>>)]) -> String {
    let mut out = String::from("estimator,x1,tau_hat\n");
    for (id, column) in results {
        for (point, value) in grid.iter().zip(column) {
            let cell = value.map(format_sig9).unwrap_or_default();
            out.push_str(&format!("{id},{},{cell}\n", format_point_sig9(point)));
        }
    }
    out
}

/// Plot-ready (x1, tau_hat) pairs, skipping degenerate points.
fn plot_csv(grid: &[Vec<f64>], column: &[Option<f64>]) -> String {
    let mut out = String::from("x1,tau_hat\n");
    for (point, value) in grid.iter().zip(column) {
        if let Some(v) = value {
            out.push_str(&format!("{},{}\n", format_point_sig9(point), format_sig9(*v)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interior_quantiles_interpolate_order_statistics() {
        let sorted: Vec<f64> = (0..=10).map(f64::from).collect();
        // Probabilities 1/4, 2/4, 3/4 over positions 0..=10.
        assert_eq!(interior_quantiles(&sorted, 3), vec![2.5, 5.0, 7.5]);
        // Single quantile = median.
        assert_eq!(interior_quantiles(&sorted, 1), vec![5.0]);
        // All requested quantiles stay strictly inside the sample range.
        let qs = interior_quantiles(&sorted, 40);
        assert_eq!(qs.len(), 40);
        assert!(qs.iter().all(|&v| v > 0.0 && v < 10.0));
        assert!(qs.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn curve_csv_keeps_missing_cells_as_empty_fields() {
        let grid = vec![vec![0.1], vec![0.2]];
        let results = vec![(EstimatorId::Nrcate, vec![Some(1.0), None])];
        let text = curves_csv(&grid, &results);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "estimator,x1,tau_hat");
        assert_eq!(lines[1], "NRCATE,1.00000000e-1,1.00000000e0");
        assert_eq!(lines[2], "NRCATE,2.00000000e-1,");
    }
}

//! Python bindings for the catereg library.
//!
//! ## Purpose
//!
//! Exposes the main operations to Python with plain-data types: building
//! and probing higher-order kernels, drawing synthetic samples from the
//! built-in designs, fitting CATE curves on user data, and running the
//! Monte Carlo harness. Inputs and outputs are lists, tuples, and dicts so
//! no Python-side dependencies are required.
//!
//! ## Design notes
//!
//! - Errors from the core library surface as `ValueError` with the
//!   original message.
//! - The estimators needing the data-generating oracle (ORCATE, OCATE)
//!   are only reachable through `run_simulation`, which owns an oracle.
//!
//! ## Non-goals
//!
//! - No NumPy coupling: conversion costs are irrelevant next to the
//!   kernel-weighted loops, and plain lists keep the module dependency-free.

use ndarray::{Array1, Array2};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use catereg::error::CateError;
use catereg::estimators::{
    ipw_cate, nrcate_with, prcate, srcate_with, EstimatorId, PseudoOutcome,
};
use catereg::firststage::{
    estimate_directions, fit_propensity_logistic_with_clip,
    fit_propensity_nonparametric_with_clip, fit_propensity_single_index_with_clip, BasisSpec,
    BasisTerm, DirectionMethod, DirectionSet, DirectionSource, DEFAULT_CLIP,
};
use catereg::kernels::{
    kernel_l2_norm_sq, kernel_moment, make_kernel, make_product_kernel, moment_report,
    KernelFamily, KernelSpec,
};
use catereg::simulation::{
    default_grid_points, generate_model, run_replications, true_tau as true_tau_fn,
    BandwidthPlan, DirectionPolicy, KernelOrders, ModelId, SimConfig,
};
use catereg::smoothing::{SampleSet, SmoothOptions};

/// Direction vectors for both arms, each row one vector of length p.
type DirectionRows = (Vec<Vec<f64>>, Vec<Vec<f64>>);

fn value_err(e: CateError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_model(text: &str) -> PyResult<ModelId> {
    text.parse::<ModelId>().map_err(value_err)
}

fn parse_family(text: &str) -> PyResult<KernelFamily> {
    match text.to_ascii_lowercase().as_str() {
        "gaussian" => Ok(KernelFamily::GaussianDerived),
        "compact" => Ok(KernelFamily::CompactPolynomial),
        other => Err(PyValueError::new_err(format!(
            "unknown kernel family '{other}'; expected 'gaussian' or 'compact'"
        ))),
    }
}

fn parse_basis(terms: &[String]) -> PyResult<BasisSpec> {
    BasisSpec::parse(terms).map_err(value_err)
}

/// Direction vectors given as rows (each of length p) become the p x r
/// column block the estimators expect.
fn beta_from_rows(rows: &[Vec<f64>], p: usize, arm: u8) -> PyResult<Array2<f64>> {
    let r = rows.len();
    let mut beta = Array2::zeros((p, r));
    for (j, row) in rows.iter().enumerate() {
        if row.len() != p {
            return Err(PyValueError::new_err(format!(
                "arm {arm} direction {j} has length {}, covariates have dimension {p}",
                row.len()
            )));
        }
        for (i, &v) in row.iter().enumerate() {
            beta[[i, j]] = v;
        }
    }
    Ok(beta)
}

/// A univariate or product higher-order kernel.
#[pyclass(name = "Kernel", frozen)]
struct PyKernel {
    inner: KernelSpec,
}

#[derive(FromPyObject)]
enum UArg {
    Scalar(f64),
    Vector(Vec<f64>),
}

#[pymethods]
impl PyKernel {
    /// Kernel(order, family="gaussian", dim=1)
    #[new]
    #[pyo3(signature = (order, family = "gaussian", dim = 1))]
    fn new(order: usize, family: &str, dim: usize) -> PyResult<Self> {
        let family = parse_family(family)?;
        let inner = make_product_kernel(family, order, dim).map_err(value_err)?;
        Ok(PyKernel { inner })
    }

    #[getter]
    fn order(&self) -> usize {
        self.inner.order()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn family(&self) -> String {
        self.inner.family().to_string()
    }

    /// Evaluate at a point: a float for dim == 1, else a sequence of
    /// length dim.
    fn __call__(&self, u: UArg) -> PyResult<f64> {
        match u {
            UArg::Scalar(v) => {
                if self.inner.dim() != 1 {
                    return Err(PyValueError::new_err(format!(
                        "kernel has dimension {}, pass a sequence",
                        self.inner.dim()
                    )));
                }
                Ok(self.inner.eval(&[v]))
            }
            UArg::Vector(v) => {
                if v.len() != self.inner.dim() {
                    return Err(PyValueError::new_err(format!(
                        "point has length {}, kernel has dimension {}",
                        v.len(),
                        self.inner.dim()
                    )));
                }
                Ok(self.inner.eval(&v))
            }
        }
    }

    /// ∫ K(u)² du (univariate kernels only).
    fn l2_norm_sq(&self) -> PyResult<f64> {
        kernel_l2_norm_sq(&self.inner).map_err(value_err)
    }

    /// ∫ uᵐ K(u) du (univariate kernels only).
    fn moment(&self, m: usize) -> PyResult<f64> {
        kernel_moment(&self.inner, m).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Kernel(order={}, family='{}', dim={})",
            self.inner.order(), self.inner.family(), self.inner.dim()
        )
    }
}

/// True effect curve of a built-in design at a conditioning value.
#[pyfunction]
fn true_tau(model: &str, x1: f64) -> PyResult<f64> {
    Ok(true_tau_fn(parse_model(model)?, x1))
}

/// Draw one synthetic sample from a built-in design.
///
/// Returns a dict with keys "x" (list of covariate rows), "y", "d",
/// "x1_idx", and "tau" (the true effect at each row's conditioning value).
#[pyfunction]
fn simulate_dataset(py: Python<'_>, model: &str, n: usize, seed: u64) -> PyResult<Py<PyDict>> {
    let model = parse_model(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (data, _oracle) = generate_model(model, n, &mut rng).map_err(value_err)?;
    let rows: Vec<Vec<f64>> = (0..data.n()).map(|i| data.row(i).to_vec()).collect();
    let tau: Vec<f64> = rows.iter().map(|r| true_tau_fn(model, r[0])).collect();
    let out = PyDict::new(py);
    out.set_item("x", rows)?;
    out.set_item("y", data.y().to_vec())?;
    out.set_item("d", data.d().to_vec())?;
    out.set_item("x1_idx", data.x1_idx().to_vec())?;
    out.set_item("tau", tau)?;
    Ok(out.into())
}

#[derive(FromPyObject)]
enum GridArg {
    Nested(Vec<Vec<f64>>),
    Flat(Vec<f64>),
}

impl GridArg {
    fn into_points(self) -> Vec<Vec<f64>> {
        match self {
            GridArg::Nested(rows) => rows,
            GridArg::Flat(values) => values.into_iter().map(|v| vec![v]).collect(),
        }
    }
}

fn build_orders(
    p: usize,
    r_max: usize,
    s1: Option<usize>,
    s2: Option<usize>,
    s4: Option<usize>,
) -> KernelOrders {
    let defaults = KernelOrders::defaults(p, r_max);
    KernelOrders {
        s1: s1.unwrap_or(defaults.s1),
        s2: s2.unwrap_or(defaults.s2),
        s4: s4.unwrap_or(defaults.s4),
    }
}

/// Fit one CATE curve on user data and return the estimates in grid order.
///
/// `estimator` is one of "PRCATE", "NRCATE", "SRCATE", "PCATE", "SCATE",
/// "NCATE". PRCATE needs `bases`; SRCATE needs `directions` (known vectors
/// per arm) or `direction_ranks` (least-squares index fit per arm).
#[pyfunction]
#[pyo3(signature = (
    x, y, d, x1_idx, estimator, grid, h1, h2, h4,
    s1 = None, s2 = None, s4 = None, family = "gaussian",
    leave_one_out = false, clip = None, bases = None,
    directions = None, direction_ranks = None, propensity_basis = None,
))]
#[allow(clippy::too_many_arguments)]
fn estimate_cate(
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    d: Vec<u8>,
    x1_idx: Vec<usize>,
    estimator: &str,
    grid: GridArg,
    h1: f64,
    h2: f64,
    h4: f64,
    s1: Option<usize>,
    s2: Option<usize>,
    s4: Option<usize>,
    family: &str,
    leave_one_out: bool,
    clip: Option<f64>,
    bases: Option<(Vec<String>, Vec<String>)>,
    directions: Option<DirectionRows>,
    direction_ranks: Option<(usize, usize)>,
    propensity_basis: Option<Vec<String>>,
) -> PyResult<Vec<f64>> {
    let id = estimator.parse::<EstimatorId>().map_err(value_err)?;
    let n = x.len();
    if n == 0 {
        return Err(PyValueError::new_err("x must be nonempty"));
    }
    let p = x[0].len();
    for (i, row) in x.iter().enumerate() {
        if row.len() != p {
            return Err(PyValueError::new_err(format!(
                "x row {i} has length {}, expected {p}",
                row.len()
            )));
        }
    }
    let mut xm = Array2::zeros((n, p));
    for (i, row) in x.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            xm[[i, j]] = v;
        }
    }
    let data =
        SampleSet::new(xm, Array1::from_vec(y), d, x1_idx).map_err(value_err)?;
    let grid = grid.into_points();

    let r_max = match (&directions, &direction_ranks) {
        (Some((b1, b0)), _) => b1.len().max(b0.len()).max(1),
        (None, Some((r1, r0))) => (*r1).max(*r0).max(1),
        (None, None) => 1,
    };
    let orders = build_orders(p, r_max, s1, s2, s4);
    let plan = BandwidthPlan::explicit(h1, h2, h4, orders)
        .map_err(value_err)?
        .with_family(parse_family(family)?);
    let options = SmoothOptions { leave_one_out };
    let clip = clip.unwrap_or(DEFAULT_CLIP);

    let curve = match id {
        EstimatorId::Prcate => {
            let (terms1, terms0) = bases
                .ok_or_else(|| PyValueError::new_err("PRCATE needs bases=(arm1, arm0)"))?;
            prcate(&data, &parse_basis(&terms1)?, &parse_basis(&terms0)?, &grid, &plan)
                .map_err(value_err)?
        }
        EstimatorId::Nrcate => nrcate_with(&data, &grid, &plan, options).map_err(value_err)?,
        EstimatorId::Srcate => {
            let set = match (&directions, &direction_ranks) {
                (Some((rows1, rows0)), _) => DirectionSet::known(
                    beta_from_rows(rows1, p, 1)?,
                    beta_from_rows(rows0, p, 0)?,
                )
                .map_err(value_err)?,
                (None, Some((r1, r0))) => {
                    let b1 = estimate_directions(&data, 1, DirectionMethod::IndexLs { r: *r1 })
                        .map_err(value_err)?;
                    let b0 = estimate_directions(&data, 0, DirectionMethod::IndexLs { r: *r0 })
                        .map_err(value_err)?;
                    DirectionSet::new(b1, b0, DirectionSource::Estimated).map_err(value_err)?
                }
                (None, None) => {
                    return Err(PyValueError::new_err(
                        "SRCATE needs directions=(arm1, arm0) or direction_ranks=(r1, r0)",
                    ))
                }
            };
            srcate_with(&data, &set, &grid, &plan, options).map_err(value_err)?
        }
        EstimatorId::Pcate => {
            let basis = match &propensity_basis {
                Some(terms) => parse_basis(terms)?,
                None => {
                    let mut terms = vec![BasisTerm::Constant];
                    terms.extend((0..p).map(BasisTerm::Coord));
                    BasisSpec::new(terms).map_err(value_err)?
                }
            };
            let prop =
                fit_propensity_logistic_with_clip(&data, &basis, clip).map_err(value_err)?;
            ipw_cate(&data, &prop, &grid, &plan).map_err(value_err)?
        }
        EstimatorId::Scate => {
            let kernel = make_kernel(plan.family(), plan.s4()).map_err(value_err)?;
            let prop = fit_propensity_single_index_with_clip(&data, plan.h4(), &kernel, clip)
                .map_err(value_err)?;
            ipw_cate(&data, &prop, &grid, &plan).map_err(value_err)?
        }
        EstimatorId::Ncate => {
            let kernel =
                make_product_kernel(plan.family(), plan.s2(), data.p()).map_err(value_err)?;
            let prop = fit_propensity_nonparametric_with_clip(&data, plan.h2(), &kernel, clip)
                .map_err(value_err)?;
            ipw_cate(&data, &prop, &grid, &plan).map_err(value_err)?
        }
        EstimatorId::Orcate | EstimatorId::Ocate => {
            return Err(PyValueError::new_err(format!(
                "{id} needs the data-generating oracle; use run_simulation"
            )));
        }
    };
    Ok(curve.estimates().to_vec())
}

/// Run the Monte Carlo harness on a built-in design.
///
/// Bandwidths: pass explicit `h1`, `h2`, `h4`, or `baselines=(a1, a2, a3)`
/// to apply the plug-in rate rules for the design's dimensions. Returns a
/// list of dicts, one per (estimator, grid point).
#[pyfunction]
#[pyo3(signature = (
    model, n, replications, seed, grid = None, estimators = None,
    h1 = None, h2 = None, h4 = None, baselines = None,
    s1 = None, s2 = None, s4 = None, family = "gaussian", clip = None,
))]
#[allow(clippy::too_many_arguments)]
fn run_simulation(
    py: Python<'_>,
    model: &str,
    n: usize,
    replications: usize,
    seed: u64,
    grid: Option<Vec<f64>>,
    estimators: Option<Vec<String>>,
    h1: Option<f64>,
    h2: Option<f64>,
    h4: Option<f64>,
    baselines: Option<(f64, f64, f64)>,
    s1: Option<usize>,
    s2: Option<usize>,
    s4: Option<usize>,
    family: &str,
    clip: Option<f64>,
) -> PyResult<Py<PyList>> {
    let model = parse_model(model)?;
    let p = model.covariate_dim();
    let orders = build_orders(p, model.r_max(), s1, s2, s4);
    let plan = match (h1, h2, h4, baselines) {
        (Some(h1), Some(h2), Some(h4), None) => {
            BandwidthPlan::explicit(h1, h2, h4, orders).map_err(value_err)?
        }
        (None, None, None, Some(b)) => {
            BandwidthPlan::from_rules(n, 1, p, model.r_max(), b, orders).map_err(value_err)?
        }
        _ => {
            return Err(PyValueError::new_err(
                "pass either all of h1, h2, h4 or baselines=(a1, a2, a3)",
            ))
        }
    };
    let plan = plan.with_family(parse_family(family)?);
    let estimators = match estimators {
        None => EstimatorId::ALL.to_vec(),
        Some(names) => names
            .iter()
            .map(|s| s.parse::<EstimatorId>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(value_err)?,
    };
    let config = SimConfig {
        model,
        n,
        replications,
        grid: grid.unwrap_or_else(default_grid_points),
        plan,
        estimators,
        direction_policy: DirectionPolicy::Known,
        clip,
        seed,
    };
    let report = run_replications(&config).map_err(value_err)?;
    let rows = PyList::empty(py);
    for summary in report.summaries() {
        for cell in &summary.cells {
            let row = PyDict::new(py);
            row.set_item("estimator", summary.estimator.to_string())?;
            row.set_item("x1", cell.x1)?;
            row.set_item("sd", cell.sd)?;
            row.set_item("bias", cell.bias)?;
            row.set_item("mse", cell.mse)?;
            row.set_item("replications_used", summary.replications_used)?;
            row.set_item("dropped", summary.dropped)?;
            rows.append(row)?;
        }
    }
    Ok(rows.into())
}

/// Moment table of a univariate kernel: list of dicts with keys "moment",
/// "value", "target", "pass".
#[pyfunction]
#[pyo3(signature = (order, family = "gaussian"))]
fn kernel_check(py: Python<'_>, order: usize, family: &str) -> PyResult<Py<PyList>> {
    let kernel = make_kernel(parse_family(family)?, order).map_err(value_err)?;
    let rows = PyList::empty(py);
    for check in moment_report(&kernel).map_err(value_err)? {
        let row = PyDict::new(py);
        row.set_item("moment", check.moment)?;
        row.set_item("value", check.value)?;
        row.set_item("target", check.target)?;
        row.set_item("pass", check.pass)?;
        rows.append(row)?;
    }
    Ok(rows.into())
}

/// The IPW pseudo-outcome under a logistic propensity fit, exposed for
/// inspection (returns one value per observation).
#[pyfunction]
#[pyo3(signature = (x, y, d, x1_idx, clip = None))]
fn ipw_pseudo_outcome(
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    d: Vec<u8>,
    x1_idx: Vec<usize>,
    clip: Option<f64>,
) -> PyResult<Vec<f64>> {
    let n = x.len();
    if n == 0 {
        return Err(PyValueError::new_err("x must be nonempty"));
    }
    let p = x[0].len();
    let mut xm = Array2::zeros((n, p));
    for (i, row) in x.iter().enumerate() {
        if row.len() != p {
            return Err(PyValueError::new_err(format!(
                "x row {i} has length {}, expected {p}",
                row.len()
            )));
        }
        for (j, &v) in row.iter().enumerate() {
            xm[[i, j]] = v;
        }
    }
    let data = SampleSet::new(xm, Array1::from_vec(y), d, x1_idx).map_err(value_err)?;
    let mut terms = vec![BasisTerm::Constant];
    terms.extend((0..p).map(BasisTerm::Coord));
    let basis = BasisSpec::new(terms).map_err(value_err)?;
    let prop = fit_propensity_logistic_with_clip(&data, &basis, clip.unwrap_or(DEFAULT_CLIP))
        .map_err(value_err)?;
    Ok(PseudoOutcome::ipw(&data, &prop).map_err(value_err)?.second_step_input())
}

#[pymodule]
fn pycatereg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyKernel>()?;
    m.add_function(wrap_pyfunction!(true_tau, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_cate, m)?)?;
    m.add_function(wrap_pyfunction!(run_simulation, m)?)?;
    m.add_function(wrap_pyfunction!(kernel_check, m)?)?;
    m.add_function(wrap_pyfunction!(ipw_pseudo_outcome, m)?)?;
    Ok(())
}

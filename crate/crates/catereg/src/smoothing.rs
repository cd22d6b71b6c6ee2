//! Nadaraya-Watson local-constant regression and kernel density estimation.
//!
//! ## Purpose
//!
//! The workhorse for every smoother in the crate: stage-one conditional
//! means over covariates or index projections, nonparametric propensities,
//! and the second-step conditional smoother all reduce to the ratio
//!
//! ```text
//! Σⱼ K((Xⱼ - x)/h) · Yⱼ  /  Σⱼ K((Xⱼ - x)/h)
//! ```
//!
//! with a single scalar bandwidth per smoother and coordinate-wise scaling.
//!
//! ## Design notes
//!
//! - The self term is always included when a query coincides with a sample
//!   point; leave-one-out evaluation is an explicit opt-in on
//!   [`SmoothOptions`], default off.
//! - Higher-order kernels produce negative weights; outputs are never
//!   clipped, since clipping would destroy the bias-reduction mechanics.
//! - Degeneracy: a query is degenerate when the total absolute kernel mass
//!   is zero (empty neighborhood: compact support misses every point, or
//!   full underflow) or when the signed mass cancels below 1e-12 of the
//!   absolute mass (catastrophic cancellation of higher-order weights).
//!   Both raise [`CateError::DegenerateMass`] instead of returning 0/0.
//!   Tiny-but-coherent masses are legal: a ratio with all weights of one
//!   sign is numerically exact however small its denominator.
//!
//! ## Invariants
//!
//! - Order-2 kernels keep the output inside [min Y, max Y].
//! - Scaling all responses by a constant scales the output; translating
//!   points and query together leaves it unchanged.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::CateError;
use crate::kernels::KernelSpec;

/// Relative cancellation floor for kernel-mass denominators.
pub const DEGENERACY_FLOOR: f64 = 1e-12;

/// Observed data: covariates, outcome, treatment indicator, and the index
/// set of the conditioning subvector X₁.
#[derive(Debug, Clone)]
pub struct SampleSet {
    x: Array2<f64>,
    y: Array1<f64>,
    d: Array1<u8>,
    x1_idx: Vec<usize>,
}

impl SampleSet {
    /// Validate and assemble a sample.
    ///
    /// Requires finite entries, binary D with both arms nonempty, and a
    /// distinct in-range conditioning index set with 1 ≤ k < p.
    pub fn new(
        x: Array2<f64>,
        y: Array1<f64>,
        d: Vec<u8>,
        x1_idx: Vec<usize>,
    ) -> Result<Self, CateError> {
        let n = x.nrows();
        let p = x.ncols();
        if n == 0 || p == 0 {
            return Err(CateError::invalid("X must be a nonempty matrix"));
        }
        if y.len() != n || d.len() != n {
            return Err(CateError::invalid(format!(
                "length mismatch: X has {n} rows, Y has {}, D has {}",
                y.len(),
                d.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(CateError::invalid("X contains a non-finite entry"));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(CateError::invalid("Y contains a non-finite entry"));
        }
        if d.iter().any(|&v| v > 1) {
            return Err(CateError::invalid("D entries must be exactly 0 or 1"));
        }
        let treated = d.iter().filter(|&&v| v == 1).count();
        if treated == 0 || treated == n {
            return Err(CateError::invalid("both treatment arms must be nonempty"));
        }
        if x1_idx.is_empty() || x1_idx.len() >= p {
            return Err(CateError::invalid(format!(
                "x1 index set must satisfy 1 <= k < p (k = {}, p = {p})",
                x1_idx.len()
            )));
        }
        let mut seen = vec![false; p];
        for &j in &x1_idx {
            if j >= p {
                return Err(CateError::invalid(format!(
                    "x1 index {j} out of range for p = {p}"
                )));
            }
            if seen[j] {
                return Err(CateError::invalid(format!("x1 index {j} repeated")));
            }
            seen[j] = true;
        }
        Ok(SampleSet {
            x,
            y,
            d: Array1::from_vec(d),
            x1_idx,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Dimension k of the conditioning subvector X₁.
    pub fn k(&self) -> usize {
        self.x1_idx.len()
    }

    pub fn x(&self) -> ArrayView2<'_, f64> {
        self.x.view()
    }

    pub fn y(&self) -> ArrayView1<'_, f64> {
        self.y.view()
    }

    pub fn d(&self) -> ArrayView1<'_, u8> {
        self.d.view()
    }

    pub fn x1_idx(&self) -> &[usize] {
        &self.x1_idx
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.x.row(i)
    }

    /// The X₁ block of row `i`, in x1_idx order.
    pub fn x1_row(&self, i: usize) -> Vec<f64> {
        self.x1_idx.iter().map(|&j| self.x[(i, j)]).collect()
    }

    /// Row indices belonging to the given arm.
    pub fn arm_indices(&self, arm: u8) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.d[i] == arm).collect()
    }
}

pub(crate) fn check_bandwidth(h: f64) -> Result<(), CateError> {
    if h <= 0.0 || !h.is_finite() {
        return Err(CateError::invalid(format!(
            "bandwidth must be positive and finite, got {h}"
        )));
    }
    Ok(())
}

fn check_mass<C: FnOnce() -> String>(
    sum: f64,
    total_abs: f64,
    context: C,
) -> Result<(), CateError> {
    if total_abs == 0.0 || sum.abs() < DEGENERACY_FLOOR * total_abs {
        return Err(CateError::DegenerateMass {
            context: context(),
            mass: sum,
            total_abs,
        });
    }
    Ok(())
}

fn validate_smoother_args(
    points: &ArrayView2<'_, f64>,
    query: &[f64],
    h: f64,
    kernel: &KernelSpec,
) -> Result<(), CateError> {
    if points.nrows() == 0 {
        return Err(CateError::invalid("smoother needs at least one point"));
    }
    check_bandwidth(h)?;
    let d = points.ncols();
    if query.len() != d {
        return Err(CateError::invalid(format!(
            "query has length {}, points have {d} columns",
            query.len()
        )));
    }
    if kernel.dim() != d {
        return Err(CateError::invalid(format!(
            "kernel dim {} does not match point dim {d}",
            kernel.dim()
        )));
    }
    Ok(())
}

fn nw_sums(
    points: &ArrayView2<'_, f64>,
    responses: &ArrayView1<'_, f64>,
    query: &[f64],
    h: f64,
    kernel: &KernelSpec,
    exclude: Option<usize>,
) -> (f64, f64, f64) {
    let d = points.ncols();
    let mut u = vec![0.0; d];
    let mut num = 0.0;
    let mut den = 0.0;
    let mut total_abs = 0.0;
    for (j, row) in points.rows().into_iter().enumerate() {
        if exclude == Some(j) {
            continue;
        }
        for l in 0..d {
            u[l] = (row[l] - query[l]) / h;
        }
        let w = kernel.eval(&u);
        num += w * responses[j];
        den += w;
        total_abs += w.abs();
    }
    (num, den, total_abs)
}

/// Nadaraya-Watson regression of `responses` on `points` at `query`.
pub fn nw_regress(
    points: ArrayView2<'_, f64>,
    responses: ArrayView1<'_, f64>,
    query: &[f64],
    h: f64,
    kernel: &KernelSpec,
) -> Result<f64, CateError> {
    nw_regress_excluding(points, responses, query, h, kernel, None)
}

/// As [`nw_regress`], optionally excluding one point (leave-one-out).
pub fn nw_regress_excluding(
    points: ArrayView2<'_, f64>,
    responses: ArrayView1<'_, f64>,
    query: &[f64],
    h: f64,
    kernel: &KernelSpec,
    exclude: Option<usize>,
) -> Result<f64, CateError> {
    validate_smoother_args(&points, query, h, kernel)?;
    if responses.len() != points.nrows() {
        return Err(CateError::invalid(format!(
            "responses length {} does not match point count {}",
            responses.len(),
            points.nrows()
        )));
    }
    let (num, den, total_abs) = nw_sums(&points, &responses, query, h, kernel, exclude);
    check_mass(den, total_abs, || format!("nw_regress at query {query:?}"))?;
    Ok(num / den)
}

/// Kernel density estimate (1/(m·h^d)) Σⱼ K((Xⱼ - query)/h).
///
/// Zero is a legal density value, so no degeneracy error is raised.
pub fn kde(
    points: ArrayView2<'_, f64>,
    query: &[f64],
    h: f64,
    kernel: &KernelSpec,
) -> Result<f64, CateError> {
    validate_smoother_args(&points, query, h, kernel)?;
    let d = points.ncols();
    let mut u = vec![0.0; d];
    let mut sum = 0.0;
    for row in points.rows() {
        for l in 0..d {
            u[l] = (row[l] - query[l]) / h;
        }
        sum += kernel.eval(&u);
    }
    Ok(sum / (points.nrows() as f64 * h.powi(d as i32)))
}

/// How stage-one smoothers see the covariates: everything, a linear index
/// block, or nothing at all.
#[derive(Debug, Clone)]
pub enum ProjectionSpec {
    /// Smooth over the full covariate vector.
    Full,
    /// Smooth over βᵀx for a p×r matrix β with r ≥ 1.
    Index(Array2<f64>),
    /// Zero-dimensional projection: the fitted function is the arm's sample
    /// mean of Y, constant in x.
    Zero,
}

impl ProjectionSpec {
    /// Dimension of the projected argument.
    pub fn output_dim(&self, p: usize) -> usize {
        match self {
            ProjectionSpec::Full => p,
            ProjectionSpec::Index(beta) => beta.ncols(),
            ProjectionSpec::Zero => 0,
        }
    }

    fn project(&self, x: ArrayView1<'_, f64>, out: &mut Vec<f64>) {
        out.clear();
        match self {
            ProjectionSpec::Full => out.extend(x.iter()),
            ProjectionSpec::Index(beta) => {
                for c in beta.columns() {
                    out.push(c.iter().zip(x.iter()).map(|(b, v)| b * v).sum());
                }
            }
            ProjectionSpec::Zero => {}
        }
    }

    fn validate(&self, p: usize) -> Result<(), CateError> {
        if let ProjectionSpec::Index(beta) = self {
            if beta.nrows() != p {
                return Err(CateError::invalid(format!(
                    "projection matrix has {} rows, covariates have dimension {p}",
                    beta.nrows()
                )));
            }
            if beta.ncols() == 0 {
                return Err(CateError::invalid(
                    "index projection needs at least one column; use ProjectionSpec::Zero",
                ));
            }
            if beta.iter().any(|v| !v.is_finite()) {
                return Err(CateError::invalid("projection matrix has non-finite entries"));
            }
        }
        Ok(())
    }
}

/// Options for fitted conditional-mean functions.
#[derive(Debug, Clone, Copy, Default)]
pub struct SmoothOptions {
    /// Exclude the queried observation's own row when it belongs to the
    /// fitting arm. Off by default: the estimators sum over all j.
    pub leave_one_out: bool,
}

/// A fitted arm-wise conditional-mean function m̂ₜ, immutable and shareable.
#[derive(Debug, Clone)]
pub struct FittedMean {
    arm: u8,
    points: Array2<f64>,
    responses: Array1<f64>,
    global_idx: Vec<usize>,
    projection: ProjectionSpec,
    h: f64,
    kernel: KernelSpec,
    constant: Option<f64>,
    leave_one_out: bool,
}

impl FittedMean {
    pub fn arm(&self) -> u8 {
        self.arm
    }

    /// Evaluate m̂ₜ at a full covariate vector.
    pub fn eval(&self, x_full: &[f64]) -> Result<f64, CateError> {
        self.eval_inner(x_full, None)
    }

    /// Evaluate m̂ₜ at sample row `global_row` (its full covariate vector
    /// given in `x_full`). Honors the leave-one-out option when the row
    /// belongs to this arm.
    pub fn eval_at_sample(&self, global_row: usize, x_full: &[f64]) -> Result<f64, CateError> {
        let exclude = if self.leave_one_out {
            self.global_idx.iter().position(|&g| g == global_row)
        } else {
            None
        };
        self.eval_inner(x_full, exclude).map_err(|e| match e {
            CateError::DegenerateMass { mass, total_abs, .. } => CateError::DegenerateMass {
                context: format!(
                    "stage-one arm-{} smoother at observation {global_row}",
                    self.arm
                ),
                mass,
                total_abs,
            },
            other => other,
        })
    }

    fn eval_inner(&self, x_full: &[f64], exclude: Option<usize>) -> Result<f64, CateError> {
        if let Some(c) = self.constant {
            return Ok(c);
        }
        let mut q = Vec::with_capacity(self.points.ncols());
        self.projection
            .project(ArrayView1::from(x_full), &mut q);
        let (num, den, total_abs) = nw_sums(
            &self.points.view(),
            &self.responses.view(),
            &q,
            self.h,
            &self.kernel,
            exclude,
        );
        check_mass(den, total_abs, || {
            format!("arm-{} conditional mean at projected query {q:?}", self.arm)
        })?;
        Ok(num / den)
    }
}

/// Fit the arm-`arm` conditional-mean smoother over the projected
/// covariates, with the self term included at own-arm sample queries.
pub fn subsample_mean_fn(
    data: &SampleSet,
    arm: u8,
    features: &ProjectionSpec,
    h: f64,
    kernel: &KernelSpec,
) -> Result<FittedMean, CateError> {
    subsample_mean_fn_with(data, arm, features, h, kernel, SmoothOptions::default())
}

/// As [`subsample_mean_fn`] with explicit [`SmoothOptions`].
pub fn subsample_mean_fn_with(
    data: &SampleSet,
    arm: u8,
    features: &ProjectionSpec,
    h: f64,
    kernel: &KernelSpec,
    options: SmoothOptions,
) -> Result<FittedMean, CateError> {
    if arm > 1 {
        return Err(CateError::invalid(format!("arm must be 0 or 1, got {arm}")));
    }
    features.validate(data.p())?;
    let rows = data.arm_indices(arm);
    if rows.is_empty() {
        return Err(CateError::invalid(format!("arm {arm} subsample is empty")));
    }
    let responses = Array1::from_iter(rows.iter().map(|&i| data.y()[i]));
    if let ProjectionSpec::Zero = features {
        let mean = responses.sum() / responses.len() as f64;
        return Ok(FittedMean {
            arm,
            points: Array2::zeros((0, 0)),
            responses,
            global_idx: rows,
            projection: ProjectionSpec::Zero,
            h,
            kernel: kernel.clone(),
            constant: Some(mean),
            leave_one_out: options.leave_one_out,
        });
    }
    let dim = features.output_dim(data.p());
    check_bandwidth(h)?;
    if kernel.dim() != dim {
        return Err(CateError::invalid(format!(
            "kernel dim {} does not match projected dim {dim}",
            kernel.dim()
        )));
    }
    let mut points = Array2::zeros((rows.len(), dim));
    let mut buf = Vec::with_capacity(dim);
    for (out_row, &i) in rows.iter().enumerate() {
        features.project(data.row(i), &mut buf);
        for (l, &v) in buf.iter().enumerate() {
            points[(out_row, l)] = v;
        }
    }
    Ok(FittedMean {
        arm,
        points,
        responses,
        global_idx: rows,
        projection: features.clone(),
        h,
        kernel: kernel.clone(),
        constant: None,
        leave_one_out: options.leave_one_out,
    })
}

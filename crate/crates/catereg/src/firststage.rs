//! Parametric outcome models, propensity models, and index directions.
//!
//! ## Purpose
//!
//! Everything the second-step smoother consumes is produced here: least
//! squares fits of per-arm outcome models over user-declared feature maps,
//! propensity scores of four kinds (known function, parametric logistic,
//! single index, fully nonparametric), and the linear directions that
//! reduce covariates to low-dimensional indices.
//!
//! ## Design notes
//!
//! - Outcome fits are ordinary least squares on each arm subsample, with an
//!   optional user-supplied weight vector; the simulation designs are
//!   homoskedastic, where unit weights are the efficient choice.
//! - The logistic solver is damped Newton (step-halving on the negative
//!   log-likelihood), at most 100 iterations, gradient sup-norm tolerance
//!   1e-8. Diverging likelihoods (separated data) are reported as
//!   [`CateError::Separation`], distinct from [`CateError::MaxIterations`].
//! - All propensity outputs are clipped to [c, 1-c], default c = 0.01, so
//!   inverse-probability weights stay bounded.
//! - Directions are identified only up to span; estimated ones are
//!   normalized to unit Euclidean norm with the first nonzero entry
//!   positive, a deterministic representative of the subspace. Known
//!   direction matrices pass through verbatim after an independence check.
//!
//! ## Invariants
//!
//! - Least-squares residuals are orthogonal to every basis column on the
//!   fitting subsample.
//! - Logistic score equations hold at convergence.
//! - Propensity probabilities are strictly inside (0, 1).
//!
//! ## Non-goals
//!
//! Sufficient-dimension-reduction estimators beyond a least-squares single
//! index, automatic rank selection, and penalized fits are out of scope.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1};

use crate::error::CateError;
use crate::kernels::KernelSpec;
use crate::smoothing::{check_bandwidth, nw_regress, SampleSet};

/// A caller-supplied propensity function (shared, thread-safe).
pub type PropensityFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Default propensity clip constant c: probabilities live in [c, 1-c].
pub const DEFAULT_CLIP: f64 = 0.01;

/// One term of a feature map: a function of the covariate row.
///
/// Coordinates are stored zero-based; the text syntax is one-based
/// (`"1"`, `"x2"`, `"x1^2"`, `"x1*x3"`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisTerm {
    Constant,
    Coord(usize),
    CoordSquare(usize),
    CoordProduct(usize, usize),
}

impl BasisTerm {
    fn eval(&self, x: ArrayView1<'_, f64>) -> f64 {
        match *self {
            BasisTerm::Constant => 1.0,
            BasisTerm::Coord(j) => x[j],
            BasisTerm::CoordSquare(j) => x[j] * x[j],
            BasisTerm::CoordProduct(j, k) => x[j] * x[k],
        }
    }

    fn max_coord(&self) -> Option<usize> {
        match *self {
            BasisTerm::Constant => None,
            BasisTerm::Coord(j) | BasisTerm::CoordSquare(j) => Some(j),
            BasisTerm::CoordProduct(j, k) => Some(j.max(k)),
        }
    }
}

fn parse_coord(token: &str) -> Result<usize, CateError> {
    let rest = token
        .strip_prefix(['x', 'X'])
        .ok_or_else(|| CateError::invalid(format!("expected coordinate like `x1`, got `{token}`")))?;
    let idx: usize = rest
        .parse()
        .map_err(|_| CateError::invalid(format!("bad coordinate index in `{token}`")))?;
    if idx == 0 {
        return Err(CateError::invalid("coordinate indices are one-based; `x0` is invalid"));
    }
    Ok(idx - 1)
}

impl FromStr for BasisTerm {
    type Err = CateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "1" {
            return Ok(BasisTerm::Constant);
        }
        if let Some((a, b)) = s.split_once('*') {
            return Ok(BasisTerm::CoordProduct(
                parse_coord(a.trim())?,
                parse_coord(b.trim())?,
            ));
        }
        if let Some(base) = s.strip_suffix("^2") {
            return Ok(BasisTerm::CoordSquare(parse_coord(base.trim())?));
        }
        parse_coord(s).map(BasisTerm::Coord)
    }
}

impl fmt::Display for BasisTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            BasisTerm::Constant => write!(f, "1"),
            BasisTerm::Coord(j) => write!(f, "x{}", j + 1),
            BasisTerm::CoordSquare(j) => write!(f, "x{}^2", j + 1),
            BasisTerm::CoordProduct(j, k) => write!(f, "x{}*x{}", j + 1, k + 1),
        }
    }
}

/// A named list of feature-map terms defining a parametric outcome model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BasisSpec {
    terms: Vec<BasisTerm>,
}

impl BasisSpec {
    pub fn new(terms: Vec<BasisTerm>) -> Result<Self, CateError> {
        if terms.is_empty() {
            return Err(CateError::invalid("basis needs at least one term"));
        }
        Ok(BasisSpec { terms })
    }

    /// Parse terms from their text syntax, e.g. `["1", "x1^2", "x2"]`.
    pub fn parse<S: AsRef<str>>(specs: &[S]) -> Result<Self, CateError> {
        let terms = specs
            .iter()
            .map(|s| s.as_ref().parse())
            .collect::<Result<Vec<_>, _>>()?;
        BasisSpec::new(terms)
    }

    pub fn terms(&self) -> &[BasisTerm] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Largest coordinate index referenced, if any term uses one.
    pub fn max_coord(&self) -> Option<usize> {
        self.terms.iter().filter_map(|t| t.max_coord()).max()
    }

    fn check_dim(&self, p: usize) -> Result<(), CateError> {
        if let Some(j) = self.max_coord() {
            if j >= p {
                return Err(CateError::invalid(format!(
                    "basis term references x{} but covariates have dimension {p}",
                    j + 1
                )));
            }
        }
        Ok(())
    }

    /// Evaluate the feature map into `out` (length [`BasisSpec::len`]).
    pub fn eval_into(&self, x: ArrayView1<'_, f64>, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.terms.len());
        for (slot, term) in out.iter_mut().zip(&self.terms) {
            *slot = term.eval(x);
        }
    }
}

impl fmt::Display for BasisSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.terms.iter().enumerate() {
            if i > 0 {
                write!(f, " + ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

/// Where a direction matrix came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirectionSource {
    Known,
    Estimated,
}

/// Per-arm index directions: beta1 is p×r₁, beta0 is p×r₀ (r may be zero).
#[derive(Debug, Clone)]
pub struct DirectionSet {
    beta1: Array2<f64>,
    beta0: Array2<f64>,
    source: DirectionSource,
}

fn check_direction_block(beta: &Array2<f64>, arm: u8) -> Result<(), CateError> {
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(CateError::invalid(format!(
            "direction matrix for arm {arm} has non-finite entries"
        )));
    }
    let r = beta.ncols();
    if r == 0 {
        return Ok(());
    }
    let m = to_dmatrix(beta);
    let svd = m.svd(false, false);
    let smax = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|&&s| s > smax * 1e-10).count();
    if rank < r {
        return Err(CateError::RankDeficient(format!(
            "direction matrix for arm {arm} has linearly dependent columns (rank {rank} < {r})"
        )));
    }
    Ok(())
}

impl DirectionSet {
    /// Assemble and validate: finite entries, independent columns per arm.
    pub fn new(
        beta1: Array2<f64>,
        beta0: Array2<f64>,
        source: DirectionSource,
    ) -> Result<Self, CateError> {
        if beta1.ncols() > 0 && beta0.ncols() > 0 && beta1.nrows() != beta0.nrows() {
            return Err(CateError::invalid(format!(
                "direction blocks disagree on covariate dimension: {} vs {}",
                beta1.nrows(),
                beta0.nrows()
            )));
        }
        check_direction_block(&beta1, 1)?;
        check_direction_block(&beta0, 0)?;
        Ok(DirectionSet { beta1, beta0, source })
    }

    pub fn known(beta1: Array2<f64>, beta0: Array2<f64>) -> Result<Self, CateError> {
        DirectionSet::new(beta1, beta0, DirectionSource::Known)
    }

    pub fn beta1(&self) -> &Array2<f64> {
        &self.beta1
    }

    pub fn beta0(&self) -> &Array2<f64> {
        &self.beta0
    }

    /// The block for one arm.
    pub fn beta(&self, arm: u8) -> &Array2<f64> {
        if arm == 1 {
            &self.beta1
        } else {
            &self.beta0
        }
    }

    /// Index dimension r(t) for the given arm.
    pub fn rank(&self, arm: u8) -> usize {
        self.beta(arm).ncols()
    }

    pub fn source(&self) -> DirectionSource {
        self.source
    }
}

/// A least-squares outcome fit: coefficients plus the callable mean
/// function m̂ₜ(x) = basis(x)ᵀα̂ₜ.
#[derive(Debug, Clone)]
pub struct FittedLinear {
    arm: u8,
    basis: BasisSpec,
    coefs: Array1<f64>,
}

impl FittedLinear {
    pub fn arm(&self) -> u8 {
        self.arm
    }

    pub fn basis(&self) -> &BasisSpec {
        &self.basis
    }

    pub fn coefs(&self) -> ArrayView1<'_, f64> {
        self.coefs.view()
    }

    pub fn eval(&self, x: ArrayView1<'_, f64>) -> f64 {
        self.basis
            .terms()
            .iter()
            .zip(self.coefs.iter())
            .map(|(t, a)| a * t.eval(x))
            .sum()
    }
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

/// Ordinary least squares of Y on `basis` over the arm subsample.
pub fn fit_outcome_ls(
    data: &SampleSet,
    arm: u8,
    basis: &BasisSpec,
) -> Result<FittedLinear, CateError> {
    fit_outcome_ls_weighted(data, arm, basis, None)
}

/// Weighted least squares; `weights` (nonnegative, one per arm row in arm
/// order) defaults to unit weights.
pub fn fit_outcome_ls_weighted(
    data: &SampleSet,
    arm: u8,
    basis: &BasisSpec,
    weights: Option<&[f64]>,
) -> Result<FittedLinear, CateError> {
    if arm > 1 {
        return Err(CateError::invalid(format!("arm must be 0 or 1, got {arm}")));
    }
    basis.check_dim(data.p())?;
    let rows = data.arm_indices(arm);
    let m = rows.len();
    let q = basis.len();
    if m < q {
        return Err(CateError::invalid(format!(
            "arm {arm} subsample has {m} rows, fewer than {q} basis terms"
        )));
    }
    if let Some(w) = weights {
        if w.len() != m {
            return Err(CateError::invalid(format!(
                "weights length {} does not match arm {arm} size {m}",
                w.len()
            )));
        }
        if w.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(CateError::invalid("weights must be finite and nonnegative"));
        }
    }
    let mut z = DMatrix::zeros(m, q);
    let mut y = DVector::zeros(m);
    let mut feat = vec![0.0; q];
    for (out_row, &i) in rows.iter().enumerate() {
        basis.eval_into(data.row(i), &mut feat);
        let sw = weights.map_or(1.0, |w| w[out_row].sqrt());
        for (c, &v) in feat.iter().enumerate() {
            z[(out_row, c)] = sw * v;
        }
        y[out_row] = sw * data.y()[i];
    }
    let svd = z.svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * 1e-10;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if smax == 0.0 || rank < q {
        return Err(CateError::RankDeficient(format!(
            "arm {arm} design matrix for basis [{basis}] has rank {rank} < {q}"
        )));
    }
    let sol = svd
        .solve(&y, tol)
        .map_err(|e| CateError::RankDeficient(format!("least-squares solve failed: {e}")))?;
    Ok(FittedLinear {
        arm,
        basis: basis.clone(),
        coefs: Array1::from_iter(sol.iter().copied()),
    })
}

/// The four propensity-score families.
#[derive(Clone)]
pub enum PropensityKind {
    /// A known propensity function supplied by the caller.
    TrueFn(PropensityFn),
    /// Parametric logistic fit over a feature map.
    Logistic { basis: BasisSpec, coefs: Array1<f64> },
    /// Nonparametric smoother of D on a fitted scalar index direction.
    SingleIndex {
        direction: Array1<f64>,
        index: Array1<f64>,
        d: Array1<f64>,
        h: f64,
        kernel: KernelSpec,
    },
    /// Nonparametric smoother of D on the full covariate vector.
    Nonparametric {
        points: Array2<f64>,
        d: Array1<f64>,
        h: f64,
        kernel: KernelSpec,
    },
}

impl fmt::Debug for PropensityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PropensityKind::TrueFn(_) => f.write_str("TrueFn(..)"),
            PropensityKind::Logistic { basis, coefs } => f
                .debug_struct("Logistic")
                .field("basis", &format!("{basis}"))
                .field("coefs", coefs)
                .finish(),
            PropensityKind::SingleIndex { direction, h, .. } => f
                .debug_struct("SingleIndex")
                .field("direction", direction)
                .field("h", h)
                .finish_non_exhaustive(),
            PropensityKind::Nonparametric { h, .. } => f
                .debug_struct("Nonparametric")
                .field("h", h)
                .finish_non_exhaustive(),
        }
    }
}

/// A fitted (or known) propensity score with clipped output.
#[derive(Debug, Clone)]
pub struct PropensityModel {
    kind: PropensityKind,
    clip: f64,
}

fn check_clip(c: f64) -> Result<(), CateError> {
    if !(c > 0.0 && c < 0.5) {
        return Err(CateError::invalid(format!(
            "clip constant must lie in (0, 0.5), got {c}"
        )));
    }
    Ok(())
}

impl PropensityModel {
    /// Wrap a known propensity function (clipped like every other kind).
    pub fn from_true_fn<F>(f: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        PropensityModel {
            kind: PropensityKind::TrueFn(Arc::new(f)),
            clip: DEFAULT_CLIP,
        }
    }

    /// Replace the clip constant (must lie in (0, 0.5)).
    pub fn with_clip(mut self, c: f64) -> Result<Self, CateError> {
        check_clip(c)?;
        self.clip = c;
        Ok(self)
    }

    pub fn clip(&self) -> f64 {
        self.clip
    }

    pub fn kind(&self) -> &PropensityKind {
        &self.kind
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            PropensityKind::TrueFn(_) => "true-function",
            PropensityKind::Logistic { .. } => "parametric-logistic",
            PropensityKind::SingleIndex { .. } => "single-index",
            PropensityKind::Nonparametric { .. } => "nonparametric",
        }
    }

    /// The propensity at a full covariate vector, clipped to [c, 1-c].
    pub fn prob(&self, x: &[f64]) -> Result<f64, CateError> {
        let raw = match &self.kind {
            PropensityKind::TrueFn(f) => f(x),
            PropensityKind::Logistic { basis, coefs } => {
                let xv = ArrayView1::from(x);
                let eta: f64 = basis
                    .terms()
                    .iter()
                    .zip(coefs.iter())
                    .map(|(t, b)| b * t.eval(xv))
                    .sum();
                sigmoid(eta)
            }
            PropensityKind::SingleIndex {
                direction,
                index,
                d,
                h,
                kernel,
            } => {
                let z: f64 = direction.iter().zip(x.iter()).map(|(b, v)| b * v).sum();
                let m = index.len();
                let pts = index.view().into_shape_with_order((m, 1)).expect("n×1 view");
                nw_regress(pts, d.view(), &[z], *h, kernel)?
            }
            PropensityKind::Nonparametric { points, d, h, kernel } => {
                nw_regress(points.view(), d.view(), x, *h, kernel)?
            }
        };
        Ok(raw.clamp(self.clip, 1.0 - self.clip))
    }
}

pub(crate) fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// Stable log(1 + e^eta).
fn log1p_exp(eta: f64) -> f64 {
    eta.max(0.0) + (-eta.abs()).exp().ln_1p()
}

/// Maximum-likelihood logistic regression of D on `basis` features by
/// damped Newton iterations.
pub fn fit_propensity_logistic(
    data: &SampleSet,
    basis: &BasisSpec,
) -> Result<PropensityModel, CateError> {
    fit_propensity_logistic_with_clip(data, basis, DEFAULT_CLIP)
}

/// As [`fit_propensity_logistic`] with an explicit clip constant.
pub fn fit_propensity_logistic_with_clip(
    data: &SampleSet,
    basis: &BasisSpec,
    clip: f64,
) -> Result<PropensityModel, CateError> {
    check_clip(clip)?;
    basis.check_dim(data.p())?;
    let n = data.n();
    let q = basis.len();
    let mut z = Array2::zeros((n, q));
    let mut feat = vec![0.0; q];
    for i in 0..n {
        basis.eval_into(data.row(i), &mut feat);
        for (c, &v) in feat.iter().enumerate() {
            z[(i, c)] = v;
        }
    }
    let d: Vec<f64> = data.d().iter().map(|&v| v as f64).collect();

    const MAX_ITERS: usize = 100;
    const GRAD_TOL: f64 = 1e-8;
    const DIVERGENCE_BOUND: f64 = 40.0;

    let nll = |beta: &DVector<f64>| -> f64 {
        let mut total = 0.0;
        for i in 0..n {
            let eta: f64 = (0..q).map(|c| z[(i, c)] * beta[c]).sum();
            total += log1p_exp(eta) - d[i] * eta;
        }
        total
    };

    let mut beta = DVector::zeros(q);
    let mut cur_nll = nll(&beta);
    for iter in 0..MAX_ITERS {
        let mut grad = DVector::zeros(q);
        let mut hess = DMatrix::zeros(q, q);
        let mut max_var = 0.0f64;
        for i in 0..n {
            let eta: f64 = (0..q).map(|c| z[(i, c)] * beta[c]).sum();
            let p = sigmoid(eta);
            let v = p * (1.0 - p);
            max_var = max_var.max(v);
            for c in 0..q {
                grad[c] += (d[i] - p) * z[(i, c)];
                for c2 in 0..=c {
                    hess[(c, c2)] += v * z[(i, c)] * z[(i, c2)];
                }
            }
        }
        for c in 0..q {
            for c2 in (c + 1)..q {
                hess[(c, c2)] = hess[(c2, c)];
            }
        }
        if grad.amax() < GRAD_TOL {
            return Ok(PropensityModel {
                kind: PropensityKind::Logistic {
                    basis: basis.clone(),
                    coefs: Array1::from_iter(beta.iter().copied()),
                },
                clip,
            });
        }
        let delta = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => {
                // A flat Hessian with probabilities pinned at 0/1 means the
                // likelihood is diverging; otherwise the features are
                // collinear.
                if max_var < 1e-10 {
                    return Err(CateError::Separation { iterations: iter });
                }
                return Err(CateError::RankDeficient(
                    "logistic Hessian is singular (collinear features)".into(),
                ));
            }
        };
        // Step-halving line search on the negative log-likelihood. The
        // sufficient-decrease margin is padded by the rounding noise of an
        // O(n)-sized objective so the search cannot stall on decreases
        // smaller than double precision can represent.
        let descent: f64 = grad.dot(&delta);
        let noise = 1e-12 * (1.0 + cur_nll.abs());
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial = &beta + &delta * step;
            let trial_nll = nll(&trial);
            if trial_nll <= cur_nll - 1e-4 * step * descent + noise {
                beta = trial;
                cur_nll = trial_nll;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return Err(CateError::MaxIterations(iter + 1));
        }
        if beta.amax() > DIVERGENCE_BOUND {
            return Err(CateError::Separation { iterations: iter + 1 });
        }
    }
    Err(CateError::MaxIterations(MAX_ITERS))
}

/// Nonparametric propensity: kernel regression of D on the full covariate
/// vector, output clipped to [c, 1-c].
pub fn fit_propensity_nonparametric(
    data: &SampleSet,
    h2: f64,
    kernel: &KernelSpec,
) -> Result<PropensityModel, CateError> {
    fit_propensity_nonparametric_with_clip(data, h2, kernel, DEFAULT_CLIP)
}

/// As [`fit_propensity_nonparametric`] with an explicit clip constant.
pub fn fit_propensity_nonparametric_with_clip(
    data: &SampleSet,
    h2: f64,
    kernel: &KernelSpec,
    clip: f64,
) -> Result<PropensityModel, CateError> {
    check_clip(clip)?;
    check_bandwidth(h2)?;
    if kernel.dim() != data.p() {
        return Err(CateError::invalid(format!(
            "kernel dim {} does not match covariate dimension {}",
            kernel.dim(),
            data.p()
        )));
    }
    Ok(PropensityModel {
        kind: PropensityKind::Nonparametric {
            points: data.x().to_owned(),
            d: data.d().mapv(|v| v as f64),
            h: h2,
            kernel: kernel.clone(),
        },
        clip,
    })
}

/// Single-index propensity: direction from the normalized slope of a
/// logistic fit on all covariates, probability from kernel regression of D
/// on the scalar index, clipped.
pub fn fit_propensity_single_index(
    data: &SampleSet,
    h4: f64,
    kernel: &KernelSpec,
) -> Result<PropensityModel, CateError> {
    fit_propensity_single_index_with_clip(data, h4, kernel, DEFAULT_CLIP)
}

/// As [`fit_propensity_single_index`] with an explicit clip constant.
pub fn fit_propensity_single_index_with_clip(
    data: &SampleSet,
    h4: f64,
    kernel: &KernelSpec,
    clip: f64,
) -> Result<PropensityModel, CateError> {
    check_clip(clip)?;
    check_bandwidth(h4)?;
    if kernel.dim() != 1 {
        return Err(CateError::invalid(
            "single-index propensity smooths a scalar index; kernel must have dim 1",
        ));
    }
    let p = data.p();
    let mut terms = vec![BasisTerm::Constant];
    terms.extend((0..p).map(BasisTerm::Coord));
    let basis = BasisSpec::new(terms)?;
    let logistic = fit_propensity_logistic_with_clip(data, &basis, clip)?;
    let coefs = match logistic.kind() {
        PropensityKind::Logistic { coefs, .. } => coefs.clone(),
        _ => unreachable!("logistic fit returns a logistic kind"),
    };
    let slope = Array1::from_iter(coefs.iter().skip(1).copied());
    let direction = normalize_direction(slope)?;
    let index = Array1::from_shape_fn(data.n(), |i| {
        direction.iter().zip(data.row(i).iter()).map(|(b, v)| b * v).sum()
    });
    Ok(PropensityModel {
        kind: PropensityKind::SingleIndex {
            direction,
            index,
            d: data.d().mapv(|v| v as f64),
            h: h4,
            kernel: kernel.clone(),
        },
        clip,
    })
}

/// Unit Euclidean norm with the first nonzero entry positive.
pub(crate) fn normalize_direction(mut v: Array1<f64>) -> Result<Array1<f64>, CateError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(CateError::RankDeficient(
            "estimated direction has zero or non-finite norm".into(),
        ));
    }
    v.mapv_inplace(|x| x / norm);
    if let Some(first) = v.iter().find(|x| **x != 0.0) {
        if *first < 0.0 {
            v.mapv_inplace(|x| -x);
        }
    }
    Ok(v)
}

/// How to obtain a direction block for one arm.
#[derive(Debug, Clone)]
pub enum DirectionMethod {
    /// A user-supplied p×r matrix, passed through after an independence
    /// check (no renormalization).
    Known(Array2<f64>),
    /// Normalized least-squares slope of Y on X within the arm; supports
    /// r = 0 (empty block) and r = 1 only.
    IndexLs { r: usize },
}

/// Produce the direction column block for one arm.
pub fn estimate_directions(
    data: &SampleSet,
    arm: u8,
    method: DirectionMethod,
) -> Result<Array2<f64>, CateError> {
    if arm > 1 {
        return Err(CateError::invalid(format!("arm must be 0 or 1, got {arm}")));
    }
    let p = data.p();
    match method {
        DirectionMethod::Known(beta) => {
            if beta.ncols() > 0 && beta.nrows() != p {
                return Err(CateError::invalid(format!(
                    "known direction matrix has {} rows, covariates have dimension {p}",
                    beta.nrows()
                )));
            }
            check_direction_block(&beta, arm)?;
            Ok(beta)
        }
        DirectionMethod::IndexLs { r } => {
            if r == 0 {
                return Ok(Array2::zeros((p, 0)));
            }
            if r > 1 {
                return Err(CateError::UnsupportedRank(r));
            }
            let rows = data.arm_indices(arm);
            if rows.len() <= p {
                return Err(CateError::invalid(format!(
                    "index-ls needs arm {arm} subsample larger than p = {p}, got {}",
                    rows.len()
                )));
            }
            let mut terms = vec![BasisTerm::Constant];
            terms.extend((0..p).map(BasisTerm::Coord));
            let basis = BasisSpec::new(terms)?;
            let fit = fit_outcome_ls(data, arm, &basis)?;
            let slope = Array1::from_iter(fit.coefs().iter().skip(1).copied());
            let unit = normalize_direction(slope)?;
            Ok(unit.into_shape_with_order((p, 1)).expect("p×1 direction"))
        }
    }
}

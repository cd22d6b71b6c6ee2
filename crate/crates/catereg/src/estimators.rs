//! Two-step CATE estimators and the shared second-step smoother.
//!
//! ## Purpose
//!
//! Implements the eight estimators of the conditional average treatment
//! effect τ(x₁) = E[Y(1) − Y(0) | X₁ = x₁]. All share the same second
//! step — a kernel regression of per-observation pseudo-outcomes on X₁ —
//! and differ only in stage one:
//!
//! - ORCATE: the true effect m₁(X) − m₀(X), given without estimation.
//! - PRCATE: per-arm least-squares fits over declared feature maps.
//! - SRCATE: per-arm kernel smoothers over index projections βₜᵀX
//!   (bandwidth h₄, order s₄); a rank-zero arm uses its sample mean.
//! - NRCATE: per-arm kernel smoothers over the full covariates
//!   (bandwidth h₂, order s₂).
//! - OCATE/PCATE/SCATE/NCATE: the inverse-probability-weighting transform
//!   ψᵢ = DᵢYᵢ/p̂(Xᵢ) − (1−Dᵢ)Yᵢ/(1−p̂(Xᵢ)) with the true, logistic,
//!   single-index, or nonparametric propensity.
//!
//! ## Design notes
//!
//! - Stage-one smoothers evaluate at every sample point, including points
//!   in the opposite arm, with the self term included for own-arm points.
//! - The IPW estimators reuse the identical second step so comparisons
//!   isolate the stage-one choice.
//! - No boundary correction: callers choose interior grids.
//!
//! ## Invariants
//!
//! - Adding a constant to all outcomes leaves the regression-based curves
//!   unchanged (each stage-one mean shifts by the constant); the IPW
//!   curves do move. Permuting observations changes nothing.
//! - With identity directions and (h₄, s₄) = (h₂, s₂), SRCATE = NRCATE
//!   exactly.

use std::fmt;
use std::str::FromStr;

use ndarray::ArrayView1;

use crate::error::CateError;
use crate::firststage::{
    fit_outcome_ls, BasisSpec, DirectionSet, PropensityKind, PropensityModel,
};
use crate::kernels::{make_product_kernel, KernelSpec};
use crate::simulation::BandwidthPlan;
use crate::smoothing::{
    nw_regress, subsample_mean_fn_with, ProjectionSpec, SampleSet, SmoothOptions,
};

/// The eight estimator identities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EstimatorId {
    /// Oracle regression: true effect, smoothed.
    Orcate,
    /// Parametric regression stage one.
    Prcate,
    /// Semiparametric (index) regression stage one.
    Srcate,
    /// Nonparametric regression stage one.
    Nrcate,
    /// IPW with the true propensity.
    Ocate,
    /// IPW with a parametric logistic propensity.
    Pcate,
    /// IPW with a single-index propensity.
    Scate,
    /// IPW with a nonparametric propensity.
    Ncate,
}

impl EstimatorId {
    /// All eight, regression estimators first.
    pub const ALL: [EstimatorId; 8] = [
        EstimatorId::Orcate,
        EstimatorId::Prcate,
        EstimatorId::Srcate,
        EstimatorId::Nrcate,
        EstimatorId::Ocate,
        EstimatorId::Pcate,
        EstimatorId::Scate,
        EstimatorId::Ncate,
    ];

    /// True for the four inverse-probability-weighting comparators.
    pub fn is_ipw(self) -> bool {
        matches!(
            self,
            EstimatorId::Ocate | EstimatorId::Pcate | EstimatorId::Scate | EstimatorId::Ncate
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorId::Orcate => "ORCATE",
            EstimatorId::Prcate => "PRCATE",
            EstimatorId::Srcate => "SRCATE",
            EstimatorId::Nrcate => "NRCATE",
            EstimatorId::Ocate => "OCATE",
            EstimatorId::Pcate => "PCATE",
            EstimatorId::Scate => "SCATE",
            EstimatorId::Ncate => "NCATE",
        }
    }
}

impl fmt::Display for EstimatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorId {
    type Err = CateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let up = s.trim().to_ascii_uppercase();
        EstimatorId::ALL
            .into_iter()
            .find(|id| id.as_str() == up)
            .ok_or_else(|| {
                CateError::invalid(format!(
                    "unknown estimator `{s}`; expected one of ORCATE, PRCATE, SRCATE, NRCATE, OCATE, PCATE, SCATE, NCATE"
                ))
            })
    }
}

/// Per-observation stage-one output feeding the second step.
#[derive(Debug, Clone)]
pub enum PseudoOutcome {
    /// Fitted conditional means m̂₁(Xᵢ), m̂₀(Xᵢ) for the regression
    /// estimators.
    Regression { m1: Vec<f64>, m0: Vec<f64> },
    /// The IPW transform ψᵢ.
    Ipw { psi: Vec<f64> },
}

impl PseudoOutcome {
    /// Regression pseudo-outcomes from per-observation fitted means.
    pub fn regression(m1: Vec<f64>, m0: Vec<f64>, n: usize) -> Result<Self, CateError> {
        if m1.len() != n || m0.len() != n {
            return Err(CateError::invalid(format!(
                "pseudo-outcome lengths ({}, {}) do not match n = {n}",
                m1.len(),
                m0.len()
            )));
        }
        if m1.iter().chain(m0.iter()).any(|v| !v.is_finite()) {
            return Err(CateError::invalid("pseudo-outcomes must be finite"));
        }
        Ok(PseudoOutcome::Regression { m1, m0 })
    }

    /// IPW pseudo-outcomes ψᵢ = DᵢYᵢ/p̂(Xᵢ) − (1−Dᵢ)Yᵢ/(1−p̂(Xᵢ)).
    pub fn ipw(data: &SampleSet, prop: &PropensityModel) -> Result<Self, CateError> {
        let mut psi = Vec::with_capacity(data.n());
        let mut xbuf = Vec::with_capacity(data.p());
        for i in 0..data.n() {
            xbuf.clear();
            xbuf.extend(data.row(i).iter());
            let p = prop.prob(&xbuf)?;
            let y = data.y()[i];
            let v = if data.d()[i] == 1 {
                y / p
            } else {
                -y / (1.0 - p)
            };
            if !v.is_finite() {
                return Err(CateError::invalid(format!(
                    "IPW pseudo-outcome at observation {i} is not finite"
                )));
            }
            psi.push(v);
        }
        Ok(PseudoOutcome::Ipw { psi })
    }

    pub fn len(&self) -> usize {
        match self {
            PseudoOutcome::Regression { m1, .. } => m1.len(),
            PseudoOutcome::Ipw { psi } => psi.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The vector entering the second step: m̂₁ − m̂₀ or ψ.
    pub fn second_step_input(&self) -> Vec<f64> {
        match self {
            PseudoOutcome::Regression { m1, m0 } => {
                m1.iter().zip(m0).map(|(a, b)| a - b).collect()
            }
            PseudoOutcome::Ipw { psi } => psi.clone(),
        }
    }

    /// Stage-one residuals Yᵢ − m̂_{Dᵢ}(Xᵢ) (regression kind only).
    pub fn residuals(&self, data: &SampleSet) -> Option<Vec<f64>> {
        match self {
            PseudoOutcome::Regression { m1, m0 } => Some(
                (0..data.n())
                    .map(|i| {
                        let fitted = if data.d()[i] == 1 { m1[i] } else { m0[i] };
                        data.y()[i] - fitted
                    })
                    .collect(),
            ),
            PseudoOutcome::Ipw { .. } => None,
        }
    }
}

/// An estimated CATE curve over a grid of conditioning points.
#[derive(Debug, Clone)]
pub struct CateCurve {
    id: EstimatorId,
    grid: Vec<Vec<f64>>,
    estimates: Vec<f64>,
    bandwidths: BandwidthPlan,
    n: usize,
    k: usize,
}

impl CateCurve {
    fn new(
        id: EstimatorId,
        grid: Vec<Vec<f64>>,
        estimates: Vec<f64>,
        bandwidths: BandwidthPlan,
        n: usize,
        k: usize,
    ) -> Result<Self, CateError> {
        if grid.len() != estimates.len() {
            return Err(CateError::invalid(format!(
                "grid has {} points but {} estimates",
                grid.len(),
                estimates.len()
            )));
        }
        if let Some(bad) = estimates.iter().find(|v| !v.is_finite()) {
            return Err(CateError::invalid(format!(
                "estimate {bad} is not finite"
            )));
        }
        Ok(CateCurve { id, grid, estimates, bandwidths, n, k })
    }

    pub fn id(&self) -> EstimatorId {
        self.id
    }

    pub fn grid(&self) -> &[Vec<f64>] {
        &self.grid
    }

    pub fn estimates(&self) -> &[f64] {
        &self.estimates
    }

    pub fn bandwidths(&self) -> &BandwidthPlan {
        &self.bandwidths
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

/// The default conditioning grid for scalar X₁.
pub fn default_grid() -> Vec<Vec<f64>> {
    [-0.4, -0.2, 0.0, 0.2, 0.4].iter().map(|&v| vec![v]).collect()
}

fn check_grid(grid: &[Vec<f64>], k: usize) -> Result<(), CateError> {
    if grid.is_empty() {
        return Err(CateError::invalid("grid must have at least one point"));
    }
    for (idx, point) in grid.iter().enumerate() {
        if point.len() != k {
            return Err(CateError::invalid(format!(
                "grid point {idx} has dimension {}, expected k = {k}",
                point.len()
            )));
        }
        if point.iter().any(|v| !v.is_finite()) {
            return Err(CateError::invalid(format!("grid point {idx} is not finite")));
        }
    }
    Ok(())
}

/// X₁ rows of the sample as an owned n×k matrix.
fn x1_points(data: &SampleSet) -> ndarray::Array2<f64> {
    let k = data.k();
    ndarray::Array2::from_shape_fn((data.n(), k), |(i, j)| data.x()[(i, data.x1_idx()[j])])
}

/// Second-step estimates, one `Result` per grid point, so callers can keep
/// partial curves when some points are degenerate.
pub fn second_step_values(
    pseudo: &[f64],
    data: &SampleSet,
    grid: &[Vec<f64>],
    h1: f64,
    k1: &KernelSpec,
) -> Result<Vec<Result<f64, CateError>>, CateError> {
    let k = data.k();
    if pseudo.len() != data.n() {
        return Err(CateError::invalid(format!(
            "pseudo-outcome vector has length {}, expected n = {}",
            pseudo.len(),
            data.n()
        )));
    }
    check_grid(grid, k)?;
    if k1.dim() != k {
        return Err(CateError::invalid(format!(
            "second-step kernel dim {} does not match k = {k}",
            k1.dim()
        )));
    }
    let points = x1_points(data);
    let responses = ArrayView1::from(pseudo);
    Ok(grid
        .iter()
        .map(|q| nw_regress(points.view(), responses, q, h1, k1))
        .collect())
}

/// The shared second step: kernel regression of the pseudo-outcome
/// difference vector on X₁ over the grid, bandwidth h₁ and kernel order s₁
/// taken from the plan.
pub fn second_step_smooth(
    id: EstimatorId,
    pseudo: &[f64],
    data: &SampleSet,
    grid: &[Vec<f64>],
    plan: &BandwidthPlan,
) -> Result<CateCurve, CateError> {
    let k1 = make_product_kernel(plan.family(), plan.s1(), data.k())?;
    let values = second_step_values(pseudo, data, grid, plan.h1(), &k1)?
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    CateCurve::new(id, grid.to_vec(), values, plan.clone(), data.n(), data.k())
}

/// Oracle-regression CATE: smooths the true effect m₁(x) − m₀(x).
pub fn orcate<F>(
    data: &SampleSet,
    true_effect: F,
    grid: &[Vec<f64>],
    plan: &BandwidthPlan,
) -> Result<CateCurve, CateError>
where
    F: Fn(ArrayView1<'_, f64>) -> f64,
{
    let pseudo: Vec<f64> = (0..data.n()).map(|i| true_effect(data.row(i))).collect();
    if let Some((i, bad)) = pseudo.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(CateError::invalid(format!(
            "true effect is not finite ({bad}) at observation {i}"
        )));
    }
    second_step_smooth(EstimatorId::Orcate, &pseudo, data, grid, plan)
}

/// Parametric-regression CATE: least-squares stage one on each arm.
pub fn prcate(
    data: &SampleSet,
    basis1: &BasisSpec,
    basis0: &BasisSpec,
    grid: &[Vec<f64>],
    plan: &BandwidthPlan,
) -> Result<CateCurve, CateError> {
    let fit1 = fit_outcome_ls(data, 1, basis1)?;
    let fit0 = fit_outcome_ls(data, 0, basis0)?;
    let m1: Vec<f64> = (0..data.n()).map(|i| fit1.eval(data.row(i))).collect();
    let m0: Vec<f64> = (0..data.n()).map(|i| fit0.eval(data.row(i))).collect();
    let pseudo = PseudoOutcome::regression(m1, m0, data.n())?;
    second_step_smooth(
        EstimatorId::Prcate,
        &pseudo.second_step_input(),
        data,
        grid,
        plan,
    )
}

/// Pseudo-outcomes for the two smoothing-based regression estimators:
/// evaluates per-arm smoothers at every observation.
fn smoothed_regression_pseudo(
    data: &SampleSet,
    proj1: &ProjectionSpec,
    proj0: &ProjectionSpec,
    h: f64,
    order: usize,
    plan: &BandwidthPlan,
    options: SmoothOptions,
) -> Result<PseudoOutcome, CateError> {
    let n = data.n();
    let p = data.p();
    let mut xbuf = Vec::with_capacity(p);
    let mut arm_fit = |arm: u8, proj: &ProjectionSpec| -> Result<Vec<f64>, CateError> {
        let dim = proj.output_dim(p);
        let kernel = make_product_kernel(plan.family(), order, dim.max(1))?;
        let mean_fn = subsample_mean_fn_with(data, arm, proj, h, &kernel, options)?;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            xbuf.clear();
            xbuf.extend(data.row(i).iter());
            out.push(mean_fn.eval_at_sample(i, &xbuf)?);
        }
        Ok(out)
    };
    let m1 = arm_fit(1, proj1)?;
    let m0 = arm_fit(0, proj0)?;
    PseudoOutcome::regression(m1, m0, n)
}

/// Nonparametric-regression CATE: per-arm smoothers over the full
/// covariates with bandwidth h₂ and kernel order s₂.
pub fn nrcate(
    data: &SampleSet,
    grid: &[Vec<f64>],
    plan: &BandwidthPlan,
) -> Result<CateCurve, CateError> {
    nrcate_with(data, grid, plan, SmoothOptions::default())
}

/// As [`nrcate`] with explicit smoothing options (leave-one-out).
pub fn nrcate_with(
    data: &SampleSet,
    grid: &[Vec<f64>],
    plan: &BandwidthPlan,
    options: SmoothOptions,
) -> Result<CateCurve, CateError> {
    let pseudo = nrcate_pseudo(data, plan, options)?;
    second_step_smooth(
        EstimatorId::Nrcate,
        &pseudo.second_step_input(),
        data,
        grid,
        plan,
    )
}

/// Stage-one pseudo-outcomes of [`nrcate`], for callers that drive the
/// second step point by point.
pub(crate) fn nrcate_pseudo(
    data: &SampleSet,
    plan: &BandwidthPlan,
    options: SmoothOptions,
) -> Result<PseudoOutcome, CateError> {
    smoothed_regression_pseudo(
        data,
        &ProjectionSpec::Full,
        &ProjectionSpec::Full,
        plan.h2(),
        plan.s2(),
        plan,
        options,
    )
}

/// Semiparametric-regression CATE: per-arm smoothers over the index
/// projections βₜᵀX with bandwidth h₄ and kernel order s₄. An arm with
/// rank zero uses its sample mean.
pub fn srcate(
    data: &SampleSet,
    directions: &DirectionSet,
    grid: &[Vec<f64>],
    plan: &BandwidthPlan,
) -> Result<CateCurve, CateError> {
    srcate_with(data, directions, grid, plan, SmoothOptions::default())
}

/// As [`srcate`] with explicit smoothing options (leave-one-out).
pub fn srcate_with(
    data: &SampleSet,
    directions: &DirectionSet,
    grid: &[Vec<f64>],
    plan: &BandwidthPlan,
    options: SmoothOptions,
) -> Result<CateCurve, CateError> {
    let pseudo = srcate_pseudo(data, directions, plan, options)?;
    second_step_smooth(
        EstimatorId::Srcate,
        &pseudo.second_step_input(),
        data,
        grid,
        plan,
    )
}

/// Stage-one pseudo-outcomes of [`srcate`], for callers that drive the
/// second step point by point.
pub(crate) fn srcate_pseudo(
    data: &SampleSet,
    directions: &DirectionSet,
    plan: &BandwidthPlan,
    options: SmoothOptions,
) -> Result<PseudoOutcome, CateError> {
    let proj_for = |arm: u8| -> Result<ProjectionSpec, CateError> {
        let beta = directions.beta(arm);
        if beta.ncols() == 0 {
            return Ok(ProjectionSpec::Zero);
        }
        if beta.nrows() != data.p() {
            return Err(CateError::invalid(format!(
                "direction matrix for arm {arm} has {} rows, covariates have dimension {}",
                beta.nrows(),
                data.p()
            )));
        }
        Ok(ProjectionSpec::Index(beta.clone()))
    };
    smoothed_regression_pseudo(
        data,
        &proj_for(1)?,
        &proj_for(0)?,
        plan.h4(),
        plan.s4(),
        plan,
        options,
    )
}

/// IPW CATE: the ψ transform under the given propensity model, smoothed by
/// the identical second step. The estimator id follows the propensity kind.
pub fn ipw_cate(
    data: &SampleSet,
    prop: &PropensityModel,
    grid: &[Vec<f64>],
    plan: &BandwidthPlan,
) -> Result<CateCurve, CateError> {
    let id = match prop.kind() {
        PropensityKind::TrueFn(_) => EstimatorId::Ocate,
        PropensityKind::Logistic { .. } => EstimatorId::Pcate,
        PropensityKind::SingleIndex { .. } => EstimatorId::Scate,
        PropensityKind::Nonparametric { .. } => EstimatorId::Ncate,
    };
    let pseudo = PseudoOutcome::ipw(data, prop)?;
    second_step_smooth(id, &pseudo.second_step_input(), data, grid, plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::firststage::{fit_propensity_logistic, DirectionMethod};
    use crate::kernels::make_gaussian_kernel;
    use crate::simulation::KernelOrders;
    use crate::smoothing::kde;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array1, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn toy_plan() -> BandwidthPlan {
        BandwidthPlan::explicit(1.0, 1.0, 1.0, KernelOrders { s1: 2, s2: 2, s4: 2 }).unwrap()
    }

    fn toy_sample() -> SampleSet {
        let x = array![
            [0.10, 1.20],
            [-0.35, 0.40],
            [0.02, 2.10],
            [0.44, 0.90],
            [-0.18, 1.55],
            [0.27, 1.05],
        ];
        let y = array![1.0, -0.5, 2.2, 0.7, 1.3, -0.2];
        let d = vec![1, 0, 1, 0, 1, 0];
        SampleSet::new(x, y, d, vec![0]).unwrap()
    }

    /// Model 1: X₁ ~ U(-1/2,1/2), X₂ = (1+2X₁)² + ζ, ζ ~ U(-1/2,1/2),
    /// Y(1) = X₁² + X₂ + ε, ε ~ N(0, 0.25²), Y(0) = 0, p = σ(X₁+X₂).
    fn model1_sample(n: usize, seed: u64, noise: bool) -> SampleSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps = Normal::new(0.0, 0.25).unwrap();
        let mut x = Array2::zeros((n, 2));
        let mut y = Array1::zeros(n);
        let mut d = Vec::with_capacity(n);
        for i in 0..n {
            let x1: f64 = rng.random_range(-0.5..0.5);
            let x2 = (1.0 + 2.0 * x1).powi(2) + rng.random_range(-0.5..0.5);
            let pr = 1.0 / (1.0 + (-(x1 + x2)).exp());
            let di = u8::from(rng.random_range(0.0..1.0) < pr);
            x[(i, 0)] = x1;
            x[(i, 1)] = x2;
            y[i] = if di == 1 {
                x1 * x1 + x2 + if noise { eps.sample(&mut rng) } else { 0.0 }
            } else {
                0.0
            };
            d.push(di);
        }
        SampleSet::new(x, y, d, vec![0]).unwrap()
    }

    #[test]
    fn estimator_id_round_trip() {
        for id in EstimatorId::ALL {
            let parsed: EstimatorId = id.as_str().parse().unwrap();
            assert_eq!(parsed, id);
            let lower: EstimatorId = id.as_str().to_ascii_lowercase().parse().unwrap();
            assert_eq!(lower, id);
        }
        assert!("XRCATE".parse::<EstimatorId>().is_err());
        assert!(EstimatorId::Ocate.is_ipw());
        assert!(!EstimatorId::Orcate.is_ipw());
    }

    #[test]
    fn constant_pseudo_gives_constant_curve() {
        let data = toy_sample();
        let pseudo = vec![5.0; data.n()];
        let curve =
            second_step_smooth(EstimatorId::Orcate, &pseudo, &data, &default_grid(), &toy_plan())
                .unwrap();
        for v in curve.estimates() {
            assert_abs_diff_eq!(*v, 5.0, epsilon = 1e-12);
        }
        assert_eq!(curve.n(), 6);
        assert_eq!(curve.k(), 1);
        assert_eq!(curve.grid().len(), 5);
    }

    #[test]
    fn second_step_matches_explicit_weights() {
        // n=4 handmade pseudo, Gaussian order-2, h₁=1, grid={0}.
        let x = array![[0.3, 0.0], [-0.7, 0.0], [1.2, 0.0], [0.1, 0.0]];
        let y = array![0.0, 0.0, 0.0, 0.0];
        let d = vec![1, 0, 1, 0];
        let data = SampleSet::new(x, y, d, vec![0]).unwrap();
        let pseudo = [2.0, -1.0, 0.5, 3.0];
        let curve =
            second_step_smooth(EstimatorId::Orcate, &pseudo, &data, &[vec![0.0]], &toy_plan())
                .unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for (x1, ps) in [(0.3, 2.0), (-0.7, -1.0), (1.2, 0.5), (0.1, 3.0)] {
            let u: f64 = x1 / 1.0;
            let w = (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
            num += w * ps;
            den += w;
        }
        assert_abs_diff_eq!(curve.estimates()[0], num / den, epsilon = 1e-12);
    }

    #[test]
    fn pseudo_shift_moves_curve_by_the_constant() {
        let data = toy_sample();
        let pseudo: Vec<f64> = (0..6).map(|i| i as f64 * 0.7 - 1.0).collect();
        let shifted: Vec<f64> = pseudo.iter().map(|v| v + 2.5).collect();
        let base =
            second_step_smooth(EstimatorId::Orcate, &pseudo, &data, &default_grid(), &toy_plan())
                .unwrap();
        let moved =
            second_step_smooth(EstimatorId::Orcate, &shifted, &data, &default_grid(), &toy_plan())
                .unwrap();
        for (a, b) in base.estimates().iter().zip(moved.estimates()) {
            assert_abs_diff_eq!(b - a, 2.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn orcate_zero_effect_gives_zero_curve() {
        let data = toy_sample();
        let curve = orcate(&data, |_| 0.0, &default_grid(), &toy_plan()).unwrap();
        for v in curve.estimates() {
            assert_eq!(*v, 0.0);
        }
        assert_eq!(curve.id(), EstimatorId::Orcate);
    }

    #[test]
    fn orcate_equals_second_step_of_precomputed_pseudo() {
        let data = toy_sample();
        let effect = |x: ArrayView1<'_, f64>| x[0] * x[0] + x[1];
        let pseudo: Vec<f64> = (0..data.n()).map(|i| effect(data.row(i))).collect();
        let via_orcate = orcate(&data, effect, &default_grid(), &toy_plan()).unwrap();
        let via_second =
            second_step_smooth(EstimatorId::Orcate, &pseudo, &data, &default_grid(), &toy_plan())
                .unwrap();
        assert_eq!(via_orcate.estimates(), via_second.estimates());
    }

    #[test]
    fn orcate_recovers_model1_effect() {
        // τ(0.2) = 0.2² + (1 + 0.4)² = 2.0.
        let data = model1_sample(500, 42, true);
        let plan = BandwidthPlan::from_rules(
            500,
            1,
            2,
            2,
            (0.05, 0.5, 0.4),
            KernelOrders::defaults(2, 2),
        )
        .unwrap();
        let curve = orcate(
            &data,
            |x| x[0] * x[0] + x[1],
            &[vec![0.2]],
            &plan,
        )
        .unwrap();
        assert!(
            (curve.estimates()[0] - 2.0).abs() < 0.15,
            "estimate {} far from 2.0",
            curve.estimates()[0]
        );
    }

    #[test]
    fn prcate_zero_outcomes_give_zero_curve() {
        let x = array![[0.1, 1.0], [-0.2, 2.0], [0.3, 0.5], [0.0, 1.5]];
        let y = array![0.0, 0.0, 0.0, 0.0];
        let d = vec![1, 0, 1, 0];
        let data = SampleSet::new(x, y, d, vec![0]).unwrap();
        let b = BasisSpec::parse(&["1"]).unwrap();
        let curve = prcate(&data, &b, &b, &default_grid(), &toy_plan()).unwrap();
        for v in curve.estimates() {
            assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn prcate_equals_orcate_on_noiseless_data() {
        // With ε = 0 and the correct bases, least squares interpolates the
        // truth exactly, so the PRCATE pseudo equals the ORCATE pseudo.
        let data = model1_sample(300, 7, false);
        let plan = BandwidthPlan::from_rules(
            300,
            1,
            2,
            2,
            (0.05, 0.5, 0.4),
            KernelOrders::defaults(2, 2),
        )
        .unwrap();
        let basis1 = BasisSpec::parse(&["1", "x1^2", "x2"]).unwrap();
        let basis0 = BasisSpec::parse(&["1"]).unwrap();
        let grid = default_grid();
        let pr = prcate(&data, &basis1, &basis0, &grid, &plan).unwrap();
        let or = orcate(&data, |x| x[0] * x[0] + x[1], &grid, &plan).unwrap();
        for (a, b) in pr.estimates().iter().zip(or.estimates()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn nrcate_constant_arms_give_mean_difference() {
        let x = array![[0.1, 1.0], [-0.2, 2.0], [0.3, 0.5], [0.0, 1.5], [0.2, 1.1]];
        let y = array![7.0, 4.0, 7.0, 4.0, 7.0];
        let d = vec![1, 0, 1, 0, 1];
        let data = SampleSet::new(x, y, d, vec![0]).unwrap();
        let curve = nrcate(&data, &default_grid(), &toy_plan()).unwrap();
        for v in curve.estimates() {
            assert_abs_diff_eq!(*v, 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn nrcate_matches_hand_rolled_double_smoother() {
        let data = toy_sample();
        let plan = toy_plan();
        let curve = nrcate(&data, &[vec![0.0], vec![0.2]], &plan).unwrap();
        // Oracle: full NW stage one per arm at each observation, then a NW
        // second step on X₁, all with explicit Gaussian weights.
        let phi = |u: f64| (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let stage1 = |arm: u8, q0: f64, q1: f64| -> f64 {
            let mut num = 0.0;
            let mut den = 0.0;
            for j in 0..data.n() {
                if data.d()[j] != arm {
                    continue;
                }
                let w = phi(data.x()[(j, 0)] - q0) * phi(data.x()[(j, 1)] - q1);
                num += w * data.y()[j];
                den += w;
            }
            num / den
        };
        for (gi, q) in [0.0, 0.2].iter().enumerate() {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..data.n() {
                let pseudo = stage1(1, data.x()[(i, 0)], data.x()[(i, 1)])
                    - stage1(0, data.x()[(i, 0)], data.x()[(i, 1)]);
                let w = phi(data.x()[(i, 0)] - q);
                num += w * pseudo;
                den += w;
            }
            assert_abs_diff_eq!(curve.estimates()[gi], num / den, epsilon = 1e-12);
        }
    }

    #[test]
    fn srcate_identity_directions_equal_nrcate() {
        let data = toy_sample();
        let plan = toy_plan(); // (h4, s4) = (h2, s2) already
        let eye = Array2::from_shape_fn((2, 2), |(i, j)| f64::from(i == j));
        let dirs = DirectionSet::known(eye.clone(), eye).unwrap();
        let sr = srcate(&data, &dirs, &default_grid(), &plan).unwrap();
        let nr = nrcate(&data, &default_grid(), &plan).unwrap();
        assert_eq!(sr.estimates(), nr.estimates());
    }

    #[test]
    fn srcate_rank_zero_arm_uses_sample_mean() {
        let x = array![[0.1, 1.0], [-0.2, 2.0], [0.3, 0.5], [0.0, 1.5]];
        let y = array![7.0, 1.0, 7.0, 3.0];
        let d = vec![1, 0, 1, 0];
        let data = SampleSet::new(x, y, d, vec![0]).unwrap();
        let dirs = DirectionSet::known(
            Array2::from_shape_vec((2, 1), vec![1.0, 0.0]).unwrap(),
            Array2::zeros((2, 0)),
        )
        .unwrap();
        // Treated outcomes are constant 7; control mean is 2 → curve ≡ 5.
        let curve = srcate(&data, &dirs, &default_grid(), &toy_plan()).unwrap();
        for v in curve.estimates() {
            assert_abs_diff_eq!(*v, 5.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn ipw_constant_half_propensity_toy() {
        // p̂ ≡ 0.5, Y = D: ψᵢ = 2 for treated, 0 for control; the curve is
        // twice the local treated share.
        let x = array![[0.3, 0.0], [-0.7, 0.0], [1.2, 0.0], [0.1, 0.0], [-0.2, 0.0]];
        let y = array![1.0, 0.0, 1.0, 1.0, 0.0];
        let d = vec![1, 0, 1, 1, 0];
        let data = SampleSet::new(x, y, d, vec![0]).unwrap();
        let prop = PropensityModel::from_true_fn(|_| 0.5);
        let grid = vec![vec![0.0], vec![0.5]];
        let curve = ipw_cate(&data, &prop, &grid, &toy_plan()).unwrap();
        assert_eq!(curve.id(), EstimatorId::Ocate);
        let phi = |u: f64| (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
        for (gi, q) in [0.0, 0.5].iter().enumerate() {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..data.n() {
                let w = phi(data.x()[(i, 0)] - q);
                let psi = if data.d()[i] == 1 { 2.0 * data.y()[i] } else { 0.0 };
                num += w * psi;
                den += w;
            }
            assert_abs_diff_eq!(curve.estimates()[gi], num / den, epsilon = 1e-12);
        }
    }

    #[test]
    fn ipw_toy_matches_hand_computed_transform() {
        let x = array![[0.2, 1.0], [-0.5, 0.3], [0.8, 2.0], [0.0, 0.9], [0.4, 1.4]];
        let y = array![1.5, -0.7, 2.0, 0.4, 1.1];
        let d = vec![1, 0, 1, 0, 1];
        let data = SampleSet::new(x, y, d, vec![0]).unwrap();
        // A known nontrivial propensity.
        let prop = PropensityModel::from_true_fn(|x: &[f64]| {
            1.0 / (1.0 + (-(x[0] + 0.3 * x[1])).exp())
        });
        let curve = ipw_cate(&data, &prop, &[vec![0.1]], &toy_plan()).unwrap();
        let phi = |u: f64| (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..data.n() {
            let p = (1.0 / (1.0 + (-(data.x()[(i, 0)] + 0.3 * data.x()[(i, 1)])).exp()))
                .clamp(0.01, 0.99);
            let psi = if data.d()[i] == 1 {
                data.y()[i] / p
            } else {
                -data.y()[i] / (1.0 - p)
            };
            let w = phi(data.x()[(i, 0)] - 0.1);
            num += w * psi;
            den += w;
        }
        assert_abs_diff_eq!(curve.estimates()[0], num / den, epsilon = 1e-12);
    }

    #[test]
    fn permutation_invariance_across_estimators() {
        let data = model1_sample(80, 13, true);
        let perm: Vec<usize> = {
            // Deterministic shuffle.
            let mut idx: Vec<usize> = (0..80).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            for i in (1..idx.len()).rev() {
                let j = rng.random_range(0..=i);
                idx.swap(i, j);
            }
            idx
        };
        let xp = Array2::from_shape_fn((80, 2), |(i, j)| data.x()[(perm[i], j)]);
        let yp = Array1::from_iter(perm.iter().map(|&i| data.y()[i]));
        let dp: Vec<u8> = perm.iter().map(|&i| data.d()[i]).collect();
        let permuted = SampleSet::new(xp, yp, dp, vec![0]).unwrap();
        let plan = BandwidthPlan::explicit(
            0.3,
            0.5,
            0.5,
            KernelOrders { s1: 2, s2: 2, s4: 2 },
        )
        .unwrap();
        let grid = default_grid();
        let b1 = BasisSpec::parse(&["1", "x1^2", "x2"]).unwrap();
        let b0 = BasisSpec::parse(&["1"]).unwrap();
        let dirs = DirectionSet::known(
            Array2::from_shape_vec((2, 1), vec![0.0, 1.0]).unwrap(),
            Array2::zeros((2, 0)),
        )
        .unwrap();
        let effect = |x: ArrayView1<'_, f64>| x[0] * x[0] + x[1];
        let prop_true = PropensityModel::from_true_fn(|x: &[f64]| {
            1.0 / (1.0 + (-(x[0] + x[1])).exp())
        });

        let pairs: Vec<(CateCurve, CateCurve)> = vec![
            (
                orcate(&data, effect, &grid, &plan).unwrap(),
                orcate(&permuted, effect, &grid, &plan).unwrap(),
            ),
            (
                prcate(&data, &b1, &b0, &grid, &plan).unwrap(),
                prcate(&permuted, &b1, &b0, &grid, &plan).unwrap(),
            ),
            (
                nrcate(&data, &grid, &plan).unwrap(),
                nrcate(&permuted, &grid, &plan).unwrap(),
            ),
            (
                srcate(&data, &dirs, &grid, &plan).unwrap(),
                srcate(&permuted, &dirs, &grid, &plan).unwrap(),
            ),
            (
                ipw_cate(&data, &prop_true, &grid, &plan).unwrap(),
                ipw_cate(&permuted, &prop_true, &grid, &plan).unwrap(),
            ),
        ];
        for (orig, perm) in &pairs {
            for (a, b) in orig.estimates().iter().zip(perm.estimates()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn outcome_shift_leaves_regression_curves_unchanged() {
        let data = model1_sample(100, 23, true);
        let shifted = SampleSet::new(
            data.x().to_owned(),
            data.y().mapv(|v| v + 10.0),
            data.d().to_vec(),
            vec![0],
        )
        .unwrap();
        let plan = BandwidthPlan::explicit(
            0.3,
            0.5,
            0.5,
            KernelOrders { s1: 2, s2: 2, s4: 2 },
        )
        .unwrap();
        let grid = default_grid();
        let b1 = BasisSpec::parse(&["1", "x1", "x2"]).unwrap();
        let b0 = BasisSpec::parse(&["1"]).unwrap();
        let dirs = DirectionSet::known(
            Array2::from_shape_vec((2, 1), vec![0.0, 1.0]).unwrap(),
            Array2::zeros((2, 0)),
        )
        .unwrap();

        let pr = prcate(&data, &b1, &b0, &grid, &plan).unwrap();
        let pr_s = prcate(&shifted, &b1, &b0, &grid, &plan).unwrap();
        let nr = nrcate(&data, &grid, &plan).unwrap();
        let nr_s = nrcate(&shifted, &grid, &plan).unwrap();
        let sr = srcate(&data, &dirs, &grid, &plan).unwrap();
        let sr_s = srcate(&shifted, &dirs, &grid, &plan).unwrap();
        for (a, b) in pr
            .estimates()
            .iter()
            .zip(pr_s.estimates())
            .chain(nr.estimates().iter().zip(nr_s.estimates()))
            .chain(sr.estimates().iter().zip(sr_s.estimates()))
        {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }

        // The IPW transform is NOT shift-invariant: dividing a shifted
        // outcome by arm-specific probabilities breaks the cancellation.
        let prop = fit_propensity_logistic(&data, &BasisSpec::parse(&["1", "x1", "x2"]).unwrap())
            .unwrap();
        let ipw = ipw_cate(&data, &prop, &grid, &plan).unwrap();
        let prop_s =
            fit_propensity_logistic(&shifted, &BasisSpec::parse(&["1", "x1", "x2"]).unwrap())
                .unwrap();
        let ipw_s = ipw_cate(&shifted, &prop_s, &grid, &plan).unwrap();
        let max_move = ipw
            .estimates()
            .iter()
            .zip(ipw_s.estimates())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_move > 0.1, "IPW curve barely moved: {max_move}");
    }

    #[test]
    fn estimated_directions_flow_through_srcate() {
        let data = model1_sample(400, 31, true);
        let beta1 = estimate_directions(&data, 1, DirectionMethod::IndexLs { r: 1 }).unwrap();
        let beta0 = estimate_directions(&data, 0, DirectionMethod::IndexLs { r: 0 }).unwrap();
        let dirs = DirectionSet::new(beta1, beta0, crate::firststage::DirectionSource::Estimated)
            .unwrap();
        let plan = BandwidthPlan::explicit(
            0.3,
            0.5,
            0.5,
            KernelOrders { s1: 2, s2: 2, s4: 2 },
        )
        .unwrap();
        let curve = srcate(&data, &dirs, &default_grid(), &plan).unwrap();
        assert_eq!(curve.estimates().len(), 5);
        assert!(curve.estimates().iter().all(|v| v.is_finite()));
    }

    use crate::firststage::estimate_directions;

    #[test]
    fn degenerate_grid_point_is_reported() {
        let data = toy_sample();
        let plan = BandwidthPlan::explicit(
            0.05,
            1.0,
            1.0,
            KernelOrders { s1: 2, s2: 2, s4: 2 },
        )
        .unwrap();
        // Compact second-step kernel, far-away grid point: no mass.
        let plan = plan.with_family(crate::kernels::KernelFamily::CompactPolynomial);
        let err = second_step_smooth(
            EstimatorId::Orcate,
            &vec![1.0; data.n()],
            &data,
            &[vec![5.0]],
            &plan,
        )
        .unwrap_err();
        assert!(matches!(err, CateError::DegenerateMass { .. }));
        // The partial variant keeps the good point and flags the bad one.
        let k1 = make_product_kernel(
            crate::kernels::KernelFamily::CompactPolynomial,
            2,
            1,
        )
        .unwrap();
        let values = second_step_values(
            &vec![1.0; data.n()],
            &data,
            &[vec![0.0], vec![5.0]],
            0.5,
            &k1,
        )
        .unwrap();
        assert!(values[0].is_ok());
        assert!(values[1].is_err());
    }

    #[test]
    fn kde_on_x1_is_available_for_density_checks() {
        // Sanity hook for the variance evaluator: the marginal density of
        // X₁ in the toy models is uniform, so a KDE at 0 should be near 1.
        let data = model1_sample(2000, 3, true);
        let pts = x1_points(&data);
        let k = make_gaussian_kernel(2).unwrap();
        let f = kde(pts.view(), &[0.0], 0.1, &k).unwrap();
        assert!((f - 1.0).abs() < 0.15, "density estimate {f}");
    }
}

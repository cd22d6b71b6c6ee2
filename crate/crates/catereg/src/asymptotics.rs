//! Influence functions, asymptotic variances, and the efficiency ranking.
//!
//! ## Purpose
//!
//! Population-side machinery for checking the distribution theory
//! numerically: the four influence transforms Ψ₁–Ψ₄ evaluated against a
//! known [`OracleModel`], Monte Carlo evaluators for the asymptotic
//! variances σ²_O = σ²_P, σ²_{S,1..4}, σ²_N of the two-step estimators, the
//! plug-in asymptotic standard deviation √(‖K₁‖₂²·σ²/f(x₁)) of the scaled
//! deviation √(n·h₁ᵏ)·(τ̂(x₁) − τ(x₁)), and a checker for the two variance
//! ranking chains
//!
//! σ²_O = σ²_P ≤ σ²_{S,2} ≤ σ²_{S,4} ≤ σ²_N,
//! σ²_O = σ²_P ≤ σ²_{S,3} ≤ σ²_{S,4} ≤ σ²_N.
//!
//! ## Design notes
//!
//! - Everything here is evaluated against an oracle — true conditional
//!   means, propensity, conditional outcome variances, and a sampler of X
//!   given X₁ = x₁ — not against data. The ranking statements are population
//!   statements, and the built-in designs make X | X₁ = x₁ trivially
//!   samplable (the remaining covariates are deterministic functions of x₁
//!   plus independent uniform disturbances).
//! - Each variance uses its closed-form decomposition σ² = σ²_O +
//!   conditional mean of an added correction: σ²_N adds
//!   Var(Y₁|X)/p(X) + Var(Y₀|X)/(1−p(X)); σ²_{S,2} adds
//!   Var(Y₁|X)/p(β₁ᵀX); σ²_{S,3} adds Var(Y₀|X)/(1−p(β₀ᵀX)); σ²_{S,4} adds
//!   both index-propensity terms. [`evaluate_profile`] computes all kinds in
//!   one pass over shared draws; Monte Carlo standard errors of the means
//!   are always propagated so inequality checks can use honest tolerances.
//! - σ²_P and σ²_{S,1} equal σ²_O by construction: the parametric stage one
//!   and the known-effect stage one leave no residual-variance correction.
//! - A rank-zero index (βₜ with no columns) conditions on the trivial
//!   σ-algebra, so its index propensity p(βₜᵀX) is the unconditional mean
//!   E[p(X)] — a constant function.
//!
//! ## Invariants
//!
//! - E[Ψ₁ | X₁ = x₁] = τ(x₁) under the oracle joint law.
//! - Ψ₂ and Ψ₃ each differ from Ψ₄ by exactly one dropped residual term.
//! - Conditional draws must reproduce the conditioning coordinates exactly;
//!   anything else raises [`CateError::SamplerMismatch`].
//! - Profile evaluation over a grid is deterministic for a fixed seed and
//!   independent of worker count (one counter-set RNG stream per point).
//!
//! ## Non-goals
//!
//! Estimating σ² from observational samples (plug-in inference) and
//! proof-level remainder decompositions are out of scope.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::CateError;
use crate::firststage::DirectionSet;

/// A real-valued function of a covariate (or conditioning) vector.
pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Draws a full covariate vector X consistent with the given X₁ block.
pub type ConditionalSampler = Arc<dyn Fn(&[f64], &mut dyn RngCore) -> Vec<f64> + Send + Sync>;

/// Draws a potential outcome Y(t) given the full covariate vector.
pub type OutcomeSampler = Arc<dyn Fn(&[f64], &mut dyn RngCore) -> f64 + Send + Sync>;

/// The true data-generating structure: conditional means, propensity,
/// conditional outcome variances, index reductions, and samplers.
///
/// Invariants are semantic and rest on the constructor: `propensity`,
/// `index_propensity1`, and `index_propensity0` must take values in (0,1) on
/// the support of X; `sample_x_given_x1` must reproduce the conditioning
/// coordinates `x1` exactly in the `x1_idx` positions (violations surface as
/// [`CateError::SamplerMismatch`] during Monte Carlo evaluation); `tau` must
/// be the conditional mean of `m1 − m0` given the X₁ block.
#[derive(Clone)]
pub struct OracleModel {
    /// Covariate dimension p.
    pub p_dim: usize,
    /// Coordinates of the conditioning block X₁ (length k).
    pub x1_idx: Vec<usize>,
    /// True treated conditional mean m₁(x) = E[Y(1) | X = x].
    pub m1: ScalarFn,
    /// True control conditional mean m₀(x) = E[Y(0) | X = x].
    pub m0: ScalarFn,
    /// True propensity p(x) = P(D = 1 | X = x).
    pub propensity: ScalarFn,
    /// Conditional outcome variance Var(Y(1) | X = x).
    pub var_y1: ScalarFn,
    /// Conditional outcome variance Var(Y(0) | X = x).
    pub var_y0: ScalarFn,
    /// Propensity seen through the treated index: x ↦ p(β₁ᵀx) =
    /// E[p(X) | β₁ᵀX = β₁ᵀx]. Constant E[p(X)] when β₁ has rank zero.
    pub index_propensity1: ScalarFn,
    /// Propensity seen through the control index: x ↦ p(β₀ᵀx).
    pub index_propensity0: ScalarFn,
    /// True index directions (β₁ is p×r₁, β₀ is p×r₀; ranks may be zero).
    pub directions: DirectionSet,
    /// True effect curve τ(x₁) = E[m₁(X) − m₀(X) | X₁ = x₁].
    pub tau: ScalarFn,
    /// Sampler of X given X₁ = x₁.
    pub sample_x_given_x1: ConditionalSampler,
    /// Sampler of Y(1) given X.
    pub sample_y1: OutcomeSampler,
    /// Sampler of Y(0) given X.
    pub sample_y0: OutcomeSampler,
}

impl fmt::Debug for OracleModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OracleModel")
            .field("p_dim", &self.p_dim)
            .field("x1_idx", &self.x1_idx)
            .field("directions", &self.directions)
            .finish_non_exhaustive()
    }
}

impl OracleModel {
    /// Conditioning dimension k.
    pub fn k(&self) -> usize {
        self.x1_idx.len()
    }

    /// The true effect m₁(x) − m₀(x) at a covariate vector.
    pub fn delta_m(&self, x: &[f64]) -> f64 {
        (self.m1)(x) - (self.m0)(x)
    }

    /// Draw the potential outcome for one arm.
    pub fn sample_y(&self, arm: u8, x: &[f64], rng: &mut dyn RngCore) -> f64 {
        if arm == 1 {
            (self.sample_y1)(x, rng)
        } else {
            (self.sample_y0)(x, rng)
        }
    }
}

/// Which influence transform to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsiVariant {
    /// Ψ₁: both residual terms weighted by the full propensity p(X).
    Psi1,
    /// Ψ₂: treated residual weighted by the treated index propensity only.
    Psi2,
    /// Ψ₃: control residual weighted by the control index propensity only.
    Psi3,
    /// Ψ₄: both residuals, each weighted by its arm's index propensity.
    Psi4,
}

impl PsiVariant {
    pub const ALL: [PsiVariant; 4] =
        [PsiVariant::Psi1, PsiVariant::Psi2, PsiVariant::Psi3, PsiVariant::Psi4];

    /// 1-based index of the variant.
    pub fn index(self) -> u8 {
        match self {
            PsiVariant::Psi1 => 1,
            PsiVariant::Psi2 => 2,
            PsiVariant::Psi3 => 3,
            PsiVariant::Psi4 => 4,
        }
    }
}

impl fmt::Display for PsiVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "psi{}", self.index())
    }
}

/// Evaluate an influence transform at one observation (x, y, d).
///
/// With Δm = m₁(x) − m₀(x) and d ∈ {0,1}:
///
/// - Ψ₁ = d·(y−m₁)/p(x) − (1−d)·(y−m₀)/(1−p(x)) + Δm
/// - Ψ₂ = d·(y−m₁)/p(β₁ᵀx) + Δm
/// - Ψ₃ = −(1−d)·(y−m₀)/(1−p(β₀ᵀx)) + Δm
/// - Ψ₄ = d·(y−m₁)/p(β₁ᵀx) − (1−d)·(y−m₀)/(1−p(β₀ᵀx)) + Δm
///
/// The oracle keeps its propensities in (0,1), so no error path exists; any
/// nonzero `d` is treated as 1.
pub fn psi(variant: PsiVariant, model: &OracleModel, x: &[f64], y: f64, d: u8) -> f64 {
    let m1 = (model.m1)(x);
    let m0 = (model.m0)(x);
    let dm = m1 - m0;
    let dd = if d != 0 { 1.0 } else { 0.0 };
    let treated_full = |p: f64| dd * (y - m1) / p;
    let control_full = |p: f64| (1.0 - dd) * (y - m0) / (1.0 - p);
    match variant {
        PsiVariant::Psi1 => {
            let p = (model.propensity)(x);
            treated_full(p) - control_full(p) + dm
        }
        PsiVariant::Psi2 => treated_full((model.index_propensity1)(x)) + dm,
        PsiVariant::Psi3 => -control_full((model.index_propensity0)(x)) + dm,
        PsiVariant::Psi4 => {
            treated_full((model.index_propensity1)(x))
                - control_full((model.index_propensity0)(x))
                + dm
        }
    }
}

/// A Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    /// Sample mean of the draws.
    pub value: f64,
    /// Standard error of the mean (sample SD / √draws).
    pub se: f64,
}

impl fmt::Display for McEstimate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6} ± {:.2e}", self.value, self.se)
    }
}

/// Which asymptotic variance to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaKind {
    /// σ²_O: known-effect benchmark (equals σ²_P and σ²_{S,1}).
    O,
    /// σ²_N: fully nonparametric stage one.
    N,
    /// σ²_{S,1}: single-index stage one with both ranks zero-corrected
    /// (identical to σ²_O).
    S1,
    /// σ²_{S,2}: treated-arm index correction only.
    S2,
    /// σ²_{S,3}: control-arm index correction only.
    S3,
    /// σ²_{S,4}: both index corrections.
    S4,
}

impl SigmaKind {
    pub const ALL: [SigmaKind; 6] = [
        SigmaKind::O,
        SigmaKind::S1,
        SigmaKind::S2,
        SigmaKind::S3,
        SigmaKind::S4,
        SigmaKind::N,
    ];

    /// Column-style label, e.g. `sigma2_S2`.
    pub fn as_str(self) -> &'static str {
        match self {
            SigmaKind::O => "sigma2_O",
            SigmaKind::N => "sigma2_N",
            SigmaKind::S1 => "sigma2_S1",
            SigmaKind::S2 => "sigma2_S2",
            SigmaKind::S3 => "sigma2_S3",
            SigmaKind::S4 => "sigma2_S4",
        }
    }
}

impl fmt::Display for SigmaKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Minimum Monte Carlo draw count accepted by the variance evaluators.
pub const MIN_MC_DRAWS: usize = 10_000;

/// Default Monte Carlo draw count per grid point.
pub const DEFAULT_MC_DRAWS: usize = 100_000;

/// Streaming mean/variance accumulator (Welford).
#[derive(Debug, Clone, Copy)]
pub(crate) struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub(crate) fn new() -> Self {
        Welford { n: 0, mean: 0.0, m2: 0.0 }
    }

    pub(crate) fn push(&mut self, v: f64) {
        self.n += 1;
        let delta = v - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (v - self.mean);
    }

    pub(crate) fn mean(&self) -> f64 {
        self.mean
    }

    /// Sample standard deviation with the (n−1) denominator; 0 below two
    /// observations.
    pub(crate) fn sample_sd(&self) -> f64 {
        if self.n >= 2 {
            (self.m2 / (self.n as f64 - 1.0)).sqrt()
        } else {
            0.0
        }
    }

    fn estimate(&self) -> McEstimate {
        let n = self.n as f64;
        let se = if self.n >= 2 { (self.m2 / (n * (n - 1.0))).sqrt() } else { 0.0 };
        McEstimate { value: self.mean, se }
    }
}

/// Verify a conditional draw reproduces the conditioning block exactly.
fn check_conditional_draw(model: &OracleModel, x1: &[f64], x: &[f64]) -> Result<(), CateError> {
    if x.len() != model.p_dim {
        return Err(CateError::invalid(format!(
            "conditional sampler drew a vector of length {}, expected covariate dimension {}",
            x.len(),
            model.p_dim
        )));
    }
    for (coord, &col) in model.x1_idx.iter().enumerate() {
        if x[col] != x1[coord] {
            return Err(CateError::SamplerMismatch { expected: x1[coord], got: x[col] });
        }
    }
    Ok(())
}

fn check_conditioning_point(model: &OracleModel, x1: &[f64]) -> Result<(), CateError> {
    if x1.len() != model.k() {
        return Err(CateError::invalid(format!(
            "conditioning point has dimension {}, expected k = {}",
            x1.len(),
            model.k()
        )));
    }
    if x1.iter().any(|v| !v.is_finite()) {
        return Err(CateError::invalid("conditioning point has non-finite entries"));
    }
    Ok(())
}

/// Integrand values for one draw, ordered (O, S2, S3, S4, N).
fn sigma_integrands(model: &OracleModel, x: &[f64], tau_x1: f64) -> Result<[f64; 5], CateError> {
    let base = {
        let dev = model.delta_m(x) - tau_x1;
        dev * dev
    };
    let v1 = (model.var_y1)(x);
    let v0 = (model.var_y0)(x);
    let p = (model.propensity)(x);
    let p1 = (model.index_propensity1)(x);
    let p0 = (model.index_propensity0)(x);
    let corr_s2 = v1 / p1;
    let corr_s3 = v0 / (1.0 - p0);
    let corr_n = v1 / p + v0 / (1.0 - p);
    let values = [base, base + corr_s2, base + corr_s3, base + corr_s2 + corr_s3, base + corr_n];
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CateError::invalid(format!(
            "oracle produced a non-finite variance integrand (p={p:.3e}, p1={p1:.3e}, p0={p0:.3e})"
        )));
    }
    Ok(values)
}

fn check_mc_draws(mc_draws: usize) -> Result<(), CateError> {
    if mc_draws < MIN_MC_DRAWS {
        return Err(CateError::invalid(format!(
            "variance evaluation needs at least {MIN_MC_DRAWS} Monte Carlo draws, got {mc_draws}"
        )));
    }
    Ok(())
}

/// Monte Carlo estimate of one asymptotic variance at a conditioning point.
///
/// Uses the closed-form decomposition for the requested kind: the shared
/// base term E[{m₁(X) − m₀(X) − τ(x₁)}² | X₁ = x₁] plus the kind's
/// inverse-propensity-weighted conditional-variance correction.
pub fn sigma_sq<R: Rng>(
    kind: SigmaKind,
    model: &OracleModel,
    x1: &[f64],
    mc_draws: usize,
    rng: &mut R,
) -> Result<McEstimate, CateError> {
    check_conditioning_point(model, x1)?;
    check_mc_draws(mc_draws)?;
    let tau_x1 = (model.tau)(x1);
    if !tau_x1.is_finite() {
        return Err(CateError::invalid("oracle tau produced a non-finite value"));
    }
    let slot = match kind {
        SigmaKind::O | SigmaKind::S1 => 0,
        SigmaKind::S2 => 1,
        SigmaKind::S3 => 2,
        SigmaKind::S4 => 3,
        SigmaKind::N => 4,
    };
    let mut acc = Welford::new();
    for _ in 0..mc_draws {
        let x = (model.sample_x_given_x1)(x1, &mut *rng);
        check_conditional_draw(model, x1, &x)?;
        acc.push(sigma_integrands(model, &x, tau_x1)?[slot]);
    }
    Ok(acc.estimate())
}

/// Monte Carlo mean of an influence transform over the oracle joint law of
/// (X, D, Y) conditional on X₁ = x₁. For Ψ₁ this recovers τ(x₁).
pub fn psi_conditional_mean<R: Rng>(
    variant: PsiVariant,
    model: &OracleModel,
    x1: &[f64],
    mc_draws: usize,
    rng: &mut R,
) -> Result<McEstimate, CateError> {
    check_conditioning_point(model, x1)?;
    if mc_draws < 2 {
        return Err(CateError::invalid("need at least 2 draws for a standard error"));
    }
    let mut acc = Welford::new();
    for _ in 0..mc_draws {
        let x = (model.sample_x_given_x1)(x1, &mut *rng);
        check_conditional_draw(model, x1, &x)?;
        let p = (model.propensity)(&x);
        let d = u8::from(rng.random::<f64>() < p);
        let y = model.sample_y(d, &x, &mut *rng);
        acc.push(psi(variant, model, &x, y, d));
    }
    Ok(acc.estimate())
}

/// All asymptotic variances at one conditioning point, with the density and
/// second-step kernel constant needed for plug-in standard deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceProfile {
    /// Conditioning point x₁.
    pub x1: Vec<f64>,
    /// σ²_O (known-effect benchmark).
    pub sigma_o: McEstimate,
    /// σ²_P — equals σ²_O by construction.
    pub sigma_p: McEstimate,
    /// σ²_{S,1} — equals σ²_O by construction.
    pub sigma_s1: McEstimate,
    /// σ²_{S,2}.
    pub sigma_s2: McEstimate,
    /// σ²_{S,3}.
    pub sigma_s3: McEstimate,
    /// σ²_{S,4}.
    pub sigma_s4: McEstimate,
    /// σ²_N.
    pub sigma_n: McEstimate,
    /// Conditioning density f(x₁).
    pub f_x1: f64,
    /// Squared L2 norm of the second-step kernel ‖K₁‖₂².
    pub k1_norm_sq: f64,
}

impl VarianceProfile {
    /// The entry for one variance kind.
    pub fn sigma(&self, kind: SigmaKind) -> McEstimate {
        match kind {
            SigmaKind::O => self.sigma_o,
            SigmaKind::N => self.sigma_n,
            SigmaKind::S1 => self.sigma_s1,
            SigmaKind::S2 => self.sigma_s2,
            SigmaKind::S3 => self.sigma_s3,
            SigmaKind::S4 => self.sigma_s4,
        }
    }

    /// Plug-in asymptotic SD √(‖K₁‖₂²·σ²/f(x₁)) for one variance kind.
    pub fn asy_sd(&self, kind: SigmaKind) -> Result<f64, CateError> {
        asy_sd(self.sigma(kind).value, self.f_x1, self.k1_norm_sq)
    }
}

/// Evaluate every asymptotic variance at one point with shared Monte Carlo
/// draws (one conditional draw feeds all integrands, so cross-kind
/// differences are estimated with common random numbers).
pub fn evaluate_profile<R: Rng>(
    model: &OracleModel,
    x1: &[f64],
    mc_draws: usize,
    f_x1: f64,
    k1_norm_sq: f64,
    rng: &mut R,
) -> Result<VarianceProfile, CateError> {
    check_conditioning_point(model, x1)?;
    check_mc_draws(mc_draws)?;
    if !f_x1.is_finite() || f_x1 <= 0.0 {
        return Err(CateError::invalid(format!(
            "conditioning density must be positive and finite, got {f_x1}"
        )));
    }
    if !k1_norm_sq.is_finite() || k1_norm_sq <= 0.0 {
        return Err(CateError::invalid(format!(
            "kernel norm ||K1||^2 must be positive and finite, got {k1_norm_sq}"
        )));
    }
    let tau_x1 = (model.tau)(x1);
    if !tau_x1.is_finite() {
        return Err(CateError::invalid("oracle tau produced a non-finite value"));
    }
    let mut acc = [Welford::new(); 5];
    for _ in 0..mc_draws {
        let x = (model.sample_x_given_x1)(x1, &mut *rng);
        check_conditional_draw(model, x1, &x)?;
        let values = sigma_integrands(model, &x, tau_x1)?;
        for (a, v) in acc.iter_mut().zip(values) {
            a.push(v);
        }
    }
    let sigma_o = acc[0].estimate();
    Ok(VarianceProfile {
        x1: x1.to_vec(),
        sigma_o,
        sigma_p: sigma_o,
        sigma_s1: sigma_o,
        sigma_s2: acc[1].estimate(),
        sigma_s3: acc[2].estimate(),
        sigma_s4: acc[3].estimate(),
        sigma_n: acc[4].estimate(),
        f_x1,
        k1_norm_sq,
    })
}

/// Evaluate profiles over a grid of conditioning points, in parallel.
///
/// Deterministic for a fixed seed regardless of worker count: point i uses
/// an independent counter-set RNG stream (seed, stream i+1), and results are
/// collected in grid order.
pub fn variance_profiles<F>(
    model: &OracleModel,
    grid: &[Vec<f64>],
    mc_draws: usize,
    density: F,
    k1_norm_sq: f64,
    seed: u64,
) -> Result<Vec<VarianceProfile>, CateError>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if grid.is_empty() {
        return Err(CateError::invalid("variance profile grid must be nonempty"));
    }
    grid.par_iter()
        .enumerate()
        .map(|(i, point)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            evaluate_profile(model, point, mc_draws, density(point), k1_norm_sq, &mut rng)
        })
        .collect()
}

/// Plug-in asymptotic standard deviation √(‖K₁‖₂²·σ²/f(x₁)) of the scaled
/// deviation √(n·h₁ᵏ)·(τ̂(x₁) − τ(x₁)).
pub fn asy_sd(sigma_sq: f64, f_x1: f64, k1_norm_sq: f64) -> Result<f64, CateError> {
    if !f_x1.is_finite() || f_x1 <= 0.0 {
        return Err(CateError::invalid(format!(
            "conditioning density must be positive and finite, got {f_x1}"
        )));
    }
    if !sigma_sq.is_finite() || sigma_sq < 0.0 {
        return Err(CateError::invalid(format!(
            "asymptotic variance must be nonnegative and finite, got {sigma_sq}"
        )));
    }
    if !k1_norm_sq.is_finite() || k1_norm_sq <= 0.0 {
        return Err(CateError::invalid(format!(
            "kernel norm ||K1||^2 must be positive and finite, got {k1_norm_sq}"
        )));
    }
    Ok((k1_norm_sq * sigma_sq / f_x1).sqrt())
}

/// One pairwise inequality check from the ranking chains.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingItem {
    /// Conditioning point the comparison was evaluated at.
    pub x1: Vec<f64>,
    /// Human-readable comparison, e.g. `sigma2_O <= sigma2_S2`.
    pub comparison: String,
    /// Left-hand variance estimate.
    pub lhs: McEstimate,
    /// Right-hand variance estimate.
    pub rhs: McEstimate,
    /// Signed margin rhs − lhs (negative means the estimates are inverted).
    pub margin: f64,
    /// Allowed statistical slack: 3·√(se_lhs² + se_rhs²).
    pub tolerance: f64,
    /// Whether lhs ≤ rhs within the slack.
    pub pass: bool,
}

impl fmt::Display for RankingItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.pass { "ok" } else { "VIOLATION" };
        write!(
            f,
            "{} at x1={:?}: {:.6} vs {:.6} (margin {:+.3e}, tol {:.3e}) {}",
            self.comparison, self.x1, self.lhs.value, self.rhs.value, self.margin, self.tolerance, verdict
        )
    }
}

/// Results of checking the ranking chains over a grid of profiles.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingReport {
    items: Vec<RankingItem>,
}

impl RankingReport {
    /// All pairwise checks, grid-ordered.
    pub fn items(&self) -> &[RankingItem] {
        &self.items
    }

    /// Checks that failed.
    pub fn violations(&self) -> Vec<&RankingItem> {
        self.items.iter().filter(|i| !i.pass).collect()
    }

    /// True when every inequality holds within its statistical slack.
    pub fn all_pass(&self) -> bool {
        self.items.iter().all(|i| i.pass)
    }

    /// One line per check.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for item in &self.items {
            out.push_str(&item.to_string());
            out.push('\n');
        }
        out
    }
}

/// Check both variance ranking chains on each profile:
/// σ²_O ≤ σ²_{S,2} ≤ σ²_{S,4} ≤ σ²_N and σ²_O ≤ σ²_{S,3} ≤ σ²_{S,4},
/// each inequality up to 3 combined Monte Carlo standard errors.
pub fn ranking_check(profiles: &[VarianceProfile]) -> RankingReport {
    const PAIRS: [(SigmaKind, SigmaKind); 5] = [
        (SigmaKind::O, SigmaKind::S2),
        (SigmaKind::O, SigmaKind::S3),
        (SigmaKind::S2, SigmaKind::S4),
        (SigmaKind::S3, SigmaKind::S4),
        (SigmaKind::S4, SigmaKind::N),
    ];
    let mut items = Vec::with_capacity(profiles.len() * PAIRS.len());
    for profile in profiles {
        for (lo, hi) in PAIRS {
            let lhs = profile.sigma(lo);
            let rhs = profile.sigma(hi);
            let margin = rhs.value - lhs.value;
            let tolerance = 3.0 * (lhs.se * lhs.se + rhs.se * rhs.se).sqrt();
            items.push(RankingItem {
                x1: profile.x1.clone(),
                comparison: format!("{lo} <= {hi}"),
                lhs,
                rhs,
                margin,
                tolerance,
                pass: margin >= -tolerance,
            });
        }
    }
    RankingReport { items }
}

/// Format a value with 9 significant digits for CSV output.
pub(crate) fn format_sig9(v: f64) -> String {
    format!("{v:.8e}")
}

/// Serialize profiles to CSV (one row per conditioning point; multi-
/// dimensional x₁ joined with ';').
pub fn profiles_to_csv(profiles: &[VarianceProfile]) -> String {
    let mut out = String::from(
        "x1,sigma2_O,se_O,sigma2_P,se_P,sigma2_S1,se_S1,sigma2_S2,se_S2,\
         sigma2_S3,se_S3,sigma2_S4,se_S4,sigma2_N,se_N,f_x1,k1_norm_sq\n",
    );
    for p in profiles {
        let x1 = p
            .x1
            .iter()
            .map(|v| format_sig9(*v))
            .collect::<Vec<_>>()
            .join(";");
        let cells: Vec<String> = [p.sigma_o, p.sigma_p, p.sigma_s1, p.sigma_s2, p.sigma_s3, p.sigma_s4, p.sigma_n]
            .iter()
            .flat_map(|e| [format_sig9(e.value), format_sig9(e.se)])
            .collect();
        out.push_str(&x1);
        out.push(',');
        out.push_str(&cells.join(","));
        out.push(',');
        out.push_str(&format_sig9(p.f_x1));
        out.push(',');
        out.push_str(&format_sig9(p.k1_norm_sq));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::firststage::sigmoid;
    use crate::kernels::{kernel_l2_norm_sq, make_gaussian_kernel};
    use crate::simulation::{model_oracle, true_tau, ModelId};
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;

    fn seeded(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Two covariates, both arms full-rank identity indices, logistic
    /// propensity in x₀ + x₁ — so the index propensities equal the full one.
    fn identity_oracle() -> OracleModel {
        let m1: ScalarFn = Arc::new(|x: &[f64]| 1.0 + x[0] + 0.5 * x[1]);
        let m0: ScalarFn = Arc::new(|x: &[f64]| 0.25 * x[0]);
        let prop: ScalarFn = Arc::new(|x: &[f64]| sigmoid(x[0] + x[1]));
        OracleModel {
            p_dim: 2,
            x1_idx: vec![0],
            m1,
            m0,
            propensity: prop.clone(),
            var_y1: Arc::new(|_| 0.09),
            var_y0: Arc::new(|_| 0.04),
            index_propensity1: prop.clone(),
            index_propensity0: prop,
            directions: DirectionSet::known(Array2::eye(2), Array2::eye(2)).unwrap(),
            tau: Arc::new(|x1: &[f64]| 1.0 + 0.75 * x1[0]),
            sample_x_given_x1: Arc::new(|x1: &[f64], rng: &mut dyn RngCore| {
                vec![x1[0], rng.random_range(-0.5..0.5)]
            }),
            sample_y1: Arc::new(|x: &[f64], rng: &mut dyn RngCore| {
                1.0 + x[0] + 0.5 * x[1] + 0.3 * crate::asymptotics::tests::std_normal(rng)
            }),
            sample_y0: Arc::new(|x: &[f64], rng: &mut dyn RngCore| {
                0.25 * x[0] + 0.2 * crate::asymptotics::tests::std_normal(rng)
            }),
        }
    }

    pub(crate) fn std_normal(rng: &mut dyn RngCore) -> f64 {
        use rand_distr::{Distribution, StandardNormal};
        let v: f64 = StandardNormal.sample(&mut *rng);
        v
    }

    /// Constant means, zero outcome variance: every σ² must be exactly 0.
    fn constant_oracle() -> OracleModel {
        let half: ScalarFn = Arc::new(|_: &[f64]| 0.5);
        OracleModel {
            p_dim: 2,
            x1_idx: vec![0],
            m1: Arc::new(|_| 3.0),
            m0: Arc::new(|_| 3.0),
            propensity: half.clone(),
            var_y1: Arc::new(|_| 0.0),
            var_y0: Arc::new(|_| 0.0),
            index_propensity1: half.clone(),
            index_propensity0: half,
            directions: DirectionSet::known(Array2::eye(2), Array2::zeros((2, 0))).unwrap(),
            tau: Arc::new(|_| 0.0),
            sample_x_given_x1: Arc::new(|x1: &[f64], _: &mut dyn RngCore| vec![x1[0], 0.3]),
            sample_y1: Arc::new(|_: &[f64], _: &mut dyn RngCore| 3.0),
            sample_y0: Arc::new(|_: &[f64], _: &mut dyn RngCore| 3.0),
        }
    }

    #[test]
    fn psi1_residual_terms_vanish_at_true_means() {
        let model = identity_oracle();
        let x = [0.2, -0.3];
        // y exactly at m1, treated: the residual term is zero.
        let y = (model.m1)(&x);
        let expected = model.delta_m(&x);
        assert_abs_diff_eq!(psi(PsiVariant::Psi1, &model, &x, y, 1), expected, epsilon = 1e-12);
        // Control observation at m0 likewise.
        let y0 = (model.m0)(&x);
        assert_abs_diff_eq!(psi(PsiVariant::Psi1, &model, &x, y0, 0), expected, epsilon = 1e-12);
    }

    #[test]
    fn psi1_half_propensity_unit_residual() {
        // p ≡ 0.5, d = 1, y = m1 + 1 → Ψ₁ = 1/0.5 + Δm = 2 + Δm.
        let mut model = identity_oracle();
        let half: ScalarFn = Arc::new(|_: &[f64]| 0.5);
        model.propensity = half.clone();
        model.index_propensity1 = half.clone();
        model.index_propensity0 = half;
        let x = [0.1, 0.4];
        let y = (model.m1)(&x) + 1.0;
        let expected = 2.0 + model.delta_m(&x);
        assert_abs_diff_eq!(psi(PsiVariant::Psi1, &model, &x, y, 1), expected, epsilon = 1e-12);
    }

    #[test]
    fn psi4_with_identity_directions_equals_psi1() {
        // Both index propensities copy the full propensity, so Ψ₄ ≡ Ψ₁.
        let model = identity_oracle();
        let mut rng = seeded(11);
        for trial in 0..10 {
            let x = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
            let y: f64 = rng.random_range(-2.0..2.0);
            let d = u8::from(trial % 2 == 0);
            assert_abs_diff_eq!(
                psi(PsiVariant::Psi4, &model, &x, y, d),
                psi(PsiVariant::Psi1, &model, &x, y, d),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn psi2_psi3_each_drop_exactly_one_term_of_psi4() {
        // Model 1 oracle: the control index has rank zero, so its index
        // propensity is a constant and differs from p(x) — a nontrivial case.
        let model = model_oracle(ModelId::One);
        let mut rng = seeded(17);
        for trial in 0..10 {
            let x1 = rng.random_range(-0.5..0.5);
            let x = (model.sample_x_given_x1)(&[x1], &mut rng);
            let y: f64 = rng.random_range(-2.0..4.0);
            let d = u8::from(trial % 2 == 0);
            let dd = f64::from(d);
            let m1 = (model.m1)(&x);
            let m0 = (model.m0)(&x);
            let p1 = (model.index_propensity1)(&x);
            let p0 = (model.index_propensity0)(&x);
            let psi2 = psi(PsiVariant::Psi2, &model, &x, y, d);
            let psi3 = psi(PsiVariant::Psi3, &model, &x, y, d);
            let psi4 = psi(PsiVariant::Psi4, &model, &x, y, d);
            // Ψ₄ − Ψ₂ = the control residual term Ψ₄ carries and Ψ₂ drops.
            assert_abs_diff_eq!(
                psi4 - psi2,
                -(1.0 - dd) * (y - m0) / (1.0 - p0),
                epsilon = 1e-12
            );
            // Ψ₄ − Ψ₃ = the treated residual term Ψ₄ carries and Ψ₃ drops.
            assert_abs_diff_eq!(psi4 - psi3, dd * (y - m1) / p1, epsilon = 1e-12);
            // Ψ₂ + Ψ₃ double-counts the common m₁ − m₀ offset.
            assert_abs_diff_eq!(psi2 + psi3 - (m1 - m0), psi4, epsilon = 1e-12);
        }
    }

    #[test]
    fn psi1_conditional_mean_recovers_tau() {
        let model = model_oracle(ModelId::One);
        let mut rng = seeded(23);
        let x1 = [0.2];
        let est = psi_conditional_mean(PsiVariant::Psi1, &model, &x1, 20_000, &mut rng).unwrap();
        let target = true_tau(ModelId::One, 0.2);
        assert!(est.se < 0.05, "unexpectedly noisy: {est}");
        assert!(
            (est.value - target).abs() <= 3.0 * est.se,
            "E[psi1|x1] = {est} should match tau = {target}"
        );
    }

    #[test]
    fn sigma_o_is_one_twelfth_for_model_one() {
        // m₁ − m₀ = x₁² + X₂ with X₂ = (1+2x₁)² + ζ, ζ ~ U(−0.5, 0.5):
        // the conditional variance is Var(ζ) = 1/12 at every x₁.
        let model = model_oracle(ModelId::One);
        for (seed, x1) in [(31u64, 0.0f64), (37, 0.3)] {
            let mut rng = seeded(seed);
            let est = sigma_sq(SigmaKind::O, &model, &[x1], MIN_MC_DRAWS, &mut rng).unwrap();
            assert!(
                (est.value - 1.0 / 12.0).abs() <= 3.0 * est.se,
                "sigma2_O at {x1}: {est} vs 1/12"
            );
        }
    }

    #[test]
    fn sigma_n_minus_o_is_the_inverse_propensity_term() {
        // Var(Y(1)|X) = 0.25², Var(Y(0)|X) = 0, so σ²_N − σ²_O =
        // 0.0625·E[1/p(X) | X₁ = 0]. Same seed → same draws → the identity
        // holds deterministically, not just statistically.
        let model = model_oracle(ModelId::One);
        let mut rng_o = seeded(41);
        let mut rng_n = seeded(41);
        let o = sigma_sq(SigmaKind::O, &model, &[0.0], MIN_MC_DRAWS, &mut rng_o).unwrap();
        let n = sigma_sq(SigmaKind::N, &model, &[0.0], MIN_MC_DRAWS, &mut rng_n).unwrap();
        // Replicate the draw stream to evaluate E[1/p] on the same points.
        let mut rng_p = seeded(41);
        let mut inv_p_mean = 0.0;
        for i in 0..MIN_MC_DRAWS {
            let x = (model.sample_x_given_x1)(&[0.0], &mut rng_p);
            inv_p_mean += (1.0 / (model.propensity)(&x) - inv_p_mean) / (i as f64 + 1.0);
        }
        assert_abs_diff_eq!(n.value - o.value, 0.0625 * inv_p_mean, epsilon = 1e-10);
        // And the correction is sane: p ∈ (σ(0.5), σ(1.5)) at x₁ = 0.
        assert!(n.value - o.value > 0.0625 / 0.82);
        assert!(n.value - o.value < 0.0625 / 0.62);
    }

    #[test]
    fn degenerate_oracle_has_all_zero_variances() {
        let model = constant_oracle();
        let mut rng = seeded(43);
        for kind in SigmaKind::ALL {
            let est = sigma_sq(kind, &model, &[0.1], MIN_MC_DRAWS, &mut rng).unwrap();
            assert_eq!(est.value, 0.0, "{kind}");
            assert_eq!(est.se, 0.0, "{kind}");
        }
    }

    #[test]
    fn sampler_mismatch_is_detected() {
        let mut model = constant_oracle();
        model.sample_x_given_x1 =
            Arc::new(|x1: &[f64], _: &mut dyn RngCore| vec![x1[0] + 0.1, 0.0]);
        let mut rng = seeded(47);
        let err = sigma_sq(SigmaKind::O, &model, &[0.2], MIN_MC_DRAWS, &mut rng).unwrap_err();
        assert!(
            matches!(err, CateError::SamplerMismatch { .. }),
            "unexpected error: {err}"
        );
    }

    #[test]
    fn draw_floor_and_dimension_are_enforced() {
        let model = constant_oracle();
        let mut rng = seeded(53);
        assert!(sigma_sq(SigmaKind::O, &model, &[0.0], 9_999, &mut rng).is_err());
        assert!(sigma_sq(SigmaKind::O, &model, &[0.0, 0.0], MIN_MC_DRAWS, &mut rng).is_err());
        assert!(evaluate_profile(&model, &[0.0], MIN_MC_DRAWS, 0.0, 1.0, &mut rng).is_err());
        assert!(evaluate_profile(&model, &[0.0], MIN_MC_DRAWS, 1.0, -1.0, &mut rng).is_err());
    }

    #[test]
    fn asy_sd_scaling_and_domain() {
        assert_eq!(asy_sd(0.0, 1.0, 0.5).unwrap(), 0.0);
        let base = asy_sd(0.3, 1.0, 0.5).unwrap();
        let doubled = asy_sd(0.6, 1.0, 0.5).unwrap();
        assert_abs_diff_eq!(doubled, std::f64::consts::SQRT_2 * base, epsilon = 1e-12);
        // Monotone increasing in σ², decreasing in f.
        assert!(asy_sd(0.4, 1.0, 0.5).unwrap() > base);
        assert!(asy_sd(0.3, 2.0, 0.5).unwrap() < base);
        assert!(asy_sd(0.3, 0.0, 0.5).is_err());
        assert!(asy_sd(0.3, -1.0, 0.5).is_err());
        assert!(asy_sd(-0.1, 1.0, 0.5).is_err());
        assert!(asy_sd(0.3, 1.0, 0.0).is_err());
        assert!(asy_sd(f64::NAN, 1.0, 0.5).is_err());
    }

    #[test]
    fn asy_sd_matches_the_known_effect_benchmark_scale() {
        // Order-4 Gaussian-derived second-step kernel, σ²_O = 1/12, f ≡ 1:
        // the plug-in SD should be close to the finite-sample SD of the
        // scaled deviation for the known-effect estimator (≈ 0.19–0.20).
        let k1 = make_gaussian_kernel(4).unwrap();
        let norm_sq = kernel_l2_norm_sq(&k1).unwrap();
        let sd = asy_sd(1.0 / 12.0, 1.0, norm_sq).unwrap();
        assert_abs_diff_eq!(sd, 0.199172, epsilon = 1e-5);
        assert!(sd > 0.19 * 0.7 && sd < 0.20 * 1.3);
    }

    #[test]
    fn model_one_profiles_respect_the_ranking() {
        let model = model_oracle(ModelId::One);
        let grid: Vec<Vec<f64>> =
            [-0.4, -0.2, 0.0, 0.2, 0.4].iter().map(|v| vec![*v]).collect();
        let profiles =
            variance_profiles(&model, &grid, 20_000, |_| 1.0, 0.476, 59).unwrap();
        assert_eq!(profiles.len(), grid.len());
        for p in &profiles {
            // σ²_P and σ²_{S,1} are σ²_O by construction.
            assert_eq!(p.sigma_p, p.sigma_o);
            assert_eq!(p.sigma_s1, p.sigma_o);
            // Shared draws make the single-arm corrections pointwise
            // nonnegative, so these hold deterministically.
            assert!(p.sigma_s2.value >= p.sigma_o.value);
            assert!(p.sigma_s4.value >= p.sigma_s2.value);
            assert!(p.sigma_s4.value >= p.sigma_s3.value);
        }
        let report = ranking_check(&profiles);
        assert_eq!(report.items().len(), grid.len() * 5);
        assert!(report.all_pass(), "violations:\n{}", report.to_text());
        // Determinism: same seed, same answer.
        let again = variance_profiles(&model, &grid, 20_000, |_| 1.0, 0.476, 59).unwrap();
        assert_eq!(profiles, again);
    }

    #[test]
    fn ranking_check_flags_hand_built_violations() {
        let tight = |v: f64| McEstimate { value: v, se: 1e-6 };
        let good = VarianceProfile {
            x1: vec![0.0],
            sigma_o: tight(0.08),
            sigma_p: tight(0.08),
            sigma_s1: tight(0.08),
            sigma_s2: tight(0.08),
            sigma_s3: tight(0.08),
            sigma_s4: tight(0.08),
            sigma_n: tight(0.08),
            f_x1: 1.0,
            k1_norm_sq: 0.5,
        };
        // Identical entries pass as equalities.
        assert!(ranking_check(std::slice::from_ref(&good)).all_pass());
        // σ²_N below σ²_{S,4} must be reported with its margin.
        let mut bad = good.clone();
        bad.sigma_n = tight(0.05);
        let report = ranking_check(std::slice::from_ref(&bad));
        assert!(!report.all_pass());
        let violations = report.violations();
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].comparison, "sigma2_S4 <= sigma2_N");
        assert_abs_diff_eq!(violations[0].margin, -0.03, epsilon = 1e-12);
        assert!(violations[0].to_string().contains("VIOLATION"));
    }

    #[test]
    fn profiles_serialize_to_csv() {
        let model = constant_oracle();
        let mut rng = seeded(61);
        let profile =
            evaluate_profile(&model, &[0.25], MIN_MC_DRAWS, 1.0, 0.476, &mut rng).unwrap();
        let csv = profiles_to_csv(&[profile]);
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].split(',').count(), 17);
        let cells: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(cells.len(), 17);
        assert_abs_diff_eq!(cells[0].parse::<f64>().unwrap(), 0.25, epsilon = 1e-12);
        // Round-trips through parse at 9 significant digits.
        assert_abs_diff_eq!(cells[15].parse::<f64>().unwrap(), 1.0, epsilon = 1e-12);
    }
}

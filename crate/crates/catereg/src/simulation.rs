//! Bandwidth plans, data-generating models, and the replication engine.
//!
//! ## Purpose
//!
//! Houses everything the Monte Carlo study needs around the estimators:
//! the bandwidth/kernel-order rules, the three synthetic models with their
//! oracles, and the replication loop producing SD/BIAS/MSE tables of the
//! scaled deviation T(x₁) = √(n·h₁ᵏ)·(τ̂(x₁) − τ(x₁)).
//!
//! ## Design notes
//!
//! - Bandwidths follow power rules h = a·n^(−1/e) with exponents derived
//!   from the smoothing dimensions and kernel orders: e₁ = k + 2s₁ for the
//!   second step, e₂ = p + s₂ for the full-covariate stage one, and
//!   e₄ = r_max + s₄ for the index stage one. Order defaults round the
//!   smoothing dimension up to even: s₂ = p or p+1, s₁ = s₂ + 2,
//!   s₄ = r_max or r_max + 1.
//! - Every bandwidth records its provenance (rule with baseline and
//!   exponent, or explicit value) so reports can echo the exact plan.
//!
//! ## Invariants
//!
//! - Plans carry positive finite bandwidths and even kernel orders ≥ 2.
//! - Rule-derived exponents are consistent with the recorded dimensions.

use std::f64::consts::FRAC_1_SQRT_2;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, OnceLock};

use ndarray::{Array1, Array2};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};

use ndarray::ArrayView1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::asymptotics::{format_sig9, ConditionalSampler, OracleModel, ScalarFn, Welford};
use crate::error::CateError;
use crate::estimators::{
    ipw_cate, nrcate, orcate, prcate, srcate, CateCurve, EstimatorId,
};
use crate::firststage::{
    estimate_directions, fit_propensity_logistic_with_clip, fit_propensity_nonparametric_with_clip,
    fit_propensity_single_index_with_clip, sigmoid, BasisSpec, BasisTerm, DirectionMethod,
    DirectionSet, DirectionSource, PropensityModel, DEFAULT_CLIP,
};
use crate::kernels::{make_kernel, make_product_kernel, KernelFamily};
use crate::quad::integrate_gl;
use crate::smoothing::{check_bandwidth, SampleSet};

/// Where a bandwidth value came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BandwidthProvenance {
    /// h = a · n^(−num/den).
    Rule { a: f64, exponent: (u32, u32) },
    /// A literal value supplied by the caller.
    Explicit,
}

impl fmt::Display for BandwidthProvenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BandwidthProvenance::Rule { a, exponent: (num, den) } => {
                write!(f, "{a}*n^(-{num}/{den})")
            }
            BandwidthProvenance::Explicit => f.write_str("explicit"),
        }
    }
}

/// One bandwidth slot of a plan request: a literal value or a power rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BandwidthSpec {
    /// Use this value as-is.
    Explicit(f64),
    /// h = a · n^(−num/den).
    Rule { a: f64, exponent: (u32, u32) },
}

/// Kernel orders for the three smoothing roles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelOrders {
    /// Second-step kernel order s₁.
    pub s1: usize,
    /// Full-covariate stage-one order s₂.
    pub s2: usize,
    /// Index stage-one order s₄.
    pub s4: usize,
}

impl KernelOrders {
    /// Default orders for covariate dimension `p` and maximum index rank
    /// `r_max`: s₂ rounds p up to even, s₁ = s₂ + 2, s₄ rounds r_max up to
    /// even (minimum 2).
    pub fn defaults(p: usize, r_max: usize) -> Self {
        let s2 = if p.is_multiple_of(2) { p } else { p + 1 };
        let s4 = match r_max {
            0 => 2,
            r if r.is_multiple_of(2) => r,
            r => r + 1,
        };
        KernelOrders { s1: s2 + 2, s2, s4 }
    }

    fn validate(&self) -> Result<(), CateError> {
        for (name, s) in [("s1", self.s1), ("s2", self.s2), ("s4", self.s4)] {
            if s == 0 || !s.is_multiple_of(2) {
                return Err(CateError::invalid(format!(
                    "kernel order {name} must be a positive even integer, got {s}"
                )));
            }
        }
        Ok(())
    }
}

/// Smoothing role a bandwidth is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BandwidthRole {
    /// Second-step smoother over X₁ (dimension k).
    H1,
    /// Stage-one smoother over the full covariates (dimension p).
    H2,
    /// Stage-one smoother over index projections (dimension ≤ r_max).
    H4,
}

/// The rule exponent denominator for a role given the problem dimensions.
fn rule_denominator(role: BandwidthRole, k: usize, p: usize, r_max: usize, orders: &KernelOrders) -> usize {
    match role {
        BandwidthRole::H1 => k + 2 * orders.s1,
        BandwidthRole::H2 => p + orders.s2,
        BandwidthRole::H4 => r_max + orders.s4,
    }
}

/// Rule bandwidth h = a·n^(−1/e) for the given role; returns the value and
/// the exponent (1, e).
pub fn bandwidth_rule(
    role: BandwidthRole,
    a: f64,
    n: usize,
    k: usize,
    p: usize,
    r_max: usize,
    orders: &KernelOrders,
) -> Result<(f64, (u32, u32)), CateError> {
    if a <= 0.0 || !a.is_finite() {
        return Err(CateError::invalid(format!(
            "bandwidth baseline must be positive, got {a}"
        )));
    }
    if n == 0 {
        return Err(CateError::invalid("sample size must be at least 1"));
    }
    orders.validate()?;
    let den = rule_denominator(role, k, p, r_max, orders);
    let h = a * (n as f64).powf(-1.0 / den as f64);
    Ok((h, (1, den as u32)))
}

/// Bandwidths, kernel orders, and kernel family for a full estimator run.
#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthPlan {
    h1: f64,
    h2: f64,
    h4: f64,
    orders: KernelOrders,
    family: KernelFamily,
    h1_src: BandwidthProvenance,
    h2_src: BandwidthProvenance,
    h4_src: BandwidthProvenance,
}

impl BandwidthPlan {
    /// A plan from literal bandwidth values.
    pub fn explicit(
        h1: f64,
        h2: f64,
        h4: f64,
        orders: KernelOrders,
    ) -> Result<Self, CateError> {
        for h in [h1, h2, h4] {
            check_bandwidth(h)?;
        }
        orders.validate()?;
        Ok(BandwidthPlan {
            h1,
            h2,
            h4,
            orders,
            family: KernelFamily::GaussianDerived,
            h1_src: BandwidthProvenance::Explicit,
            h2_src: BandwidthProvenance::Explicit,
            h4_src: BandwidthProvenance::Explicit,
        })
    }

    /// A plan from the power rules with baselines (a₁, a₂, a₃) and the
    /// problem dimensions (k, p, r_max).
    pub fn from_rules(
        n: usize,
        k: usize,
        p: usize,
        r_max: usize,
        baselines: (f64, f64, f64),
        orders: KernelOrders,
    ) -> Result<Self, CateError> {
        let (a1, a2, a3) = baselines;
        let (h1, e1) = bandwidth_rule(BandwidthRole::H1, a1, n, k, p, r_max, &orders)?;
        let (h2, e2) = bandwidth_rule(BandwidthRole::H2, a2, n, k, p, r_max, &orders)?;
        let (h4, e4) = bandwidth_rule(BandwidthRole::H4, a3, n, k, p, r_max, &orders)?;
        Ok(BandwidthPlan {
            h1,
            h2,
            h4,
            orders,
            family: KernelFamily::GaussianDerived,
            h1_src: BandwidthProvenance::Rule { a: a1, exponent: e1 },
            h2_src: BandwidthProvenance::Rule { a: a2, exponent: e2 },
            h4_src: BandwidthProvenance::Rule { a: a3, exponent: e4 },
        })
    }

    /// A plan from explicit power-rule exponents h = a·n^(−num/den), for
    /// callers that override the derived exponents.
    pub fn from_rule_exponents(
        n: usize,
        rules: [(f64, (u32, u32)); 3],
        orders: KernelOrders,
    ) -> Result<Self, CateError> {
        orders.validate()?;
        let mut h = [0.0; 3];
        for (slot, (a, (num, den))) in h.iter_mut().zip(rules) {
            if a <= 0.0 || !a.is_finite() {
                return Err(CateError::invalid(format!(
                    "bandwidth baseline must be positive, got {a}"
                )));
            }
            if num == 0 || den == 0 {
                return Err(CateError::invalid(
                    "bandwidth exponent must have positive numerator and denominator",
                ));
            }
            *slot = a * (n as f64).powf(-(num as f64) / den as f64);
        }
        Ok(BandwidthPlan {
            h1: h[0],
            h2: h[1],
            h4: h[2],
            orders,
            family: KernelFamily::GaussianDerived,
            h1_src: BandwidthProvenance::Rule { a: rules[0].0, exponent: rules[0].1 },
            h2_src: BandwidthProvenance::Rule { a: rules[1].0, exponent: rules[1].1 },
            h4_src: BandwidthProvenance::Rule { a: rules[2].0, exponent: rules[2].1 },
        })
    }

    /// A plan mixing literal values and rule forms per slot.
    pub fn from_specs(
        n: usize,
        specs: [BandwidthSpec; 3],
        orders: KernelOrders,
    ) -> Result<Self, CateError> {
        orders.validate()?;
        if n == 0 {
            return Err(CateError::invalid("sample size must be at least 1"));
        }
        let mut h = [0.0; 3];
        let mut src = [BandwidthProvenance::Explicit; 3];
        for (i, spec) in specs.into_iter().enumerate() {
            match spec {
                BandwidthSpec::Explicit(value) => {
                    check_bandwidth(value)?;
                    h[i] = value;
                    src[i] = BandwidthProvenance::Explicit;
                }
                BandwidthSpec::Rule { a, exponent: (num, den) } => {
                    if a <= 0.0 || !a.is_finite() {
                        return Err(CateError::invalid(format!(
                            "bandwidth baseline must be positive, got {a}"
                        )));
                    }
                    if num == 0 || den == 0 {
                        return Err(CateError::invalid(
                            "bandwidth exponent must have positive numerator and denominator",
                        ));
                    }
                    h[i] = a * (n as f64).powf(-(num as f64) / den as f64);
                    src[i] = BandwidthProvenance::Rule { a, exponent: (num, den) };
                }
            }
        }
        Ok(BandwidthPlan {
            h1: h[0],
            h2: h[1],
            h4: h[2],
            orders,
            family: KernelFamily::GaussianDerived,
            h1_src: src[0],
            h2_src: src[1],
            h4_src: src[2],
        })
    }

    /// Replace the kernel family (default: Gaussian-derived).
    pub fn with_family(mut self, family: KernelFamily) -> Self {
        self.family = family;
        self
    }

    pub fn h1(&self) -> f64 {
        self.h1
    }

    pub fn h2(&self) -> f64 {
        self.h2
    }

    pub fn h4(&self) -> f64 {
        self.h4
    }

    pub fn s1(&self) -> usize {
        self.orders.s1
    }

    pub fn s2(&self) -> usize {
        self.orders.s2
    }

    pub fn s4(&self) -> usize {
        self.orders.s4
    }

    pub fn orders(&self) -> KernelOrders {
        self.orders
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn provenance(&self, role: BandwidthRole) -> BandwidthProvenance {
        match role {
            BandwidthRole::H1 => self.h1_src,
            BandwidthRole::H2 => self.h2_src,
            BandwidthRole::H4 => self.h4_src,
        }
    }
}

impl fmt::Display for BandwidthPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "h1={:.6} ({}), h2={:.6} ({}), h4={:.6} ({}), orders (s1,s2,s4)=({},{},{}), family={}",
            self.h1,
            self.h1_src,
            self.h2,
            self.h2_src,
            self.h4,
            self.h4_src,
            self.orders.s1,
            self.orders.s2,
            self.orders.s4,
            self.family
        )
    }
}

/// The three built-in synthetic designs.
///
/// All of them draw X₁ ~ U(−0.5, 0.5), build the remaining covariates as
/// deterministic functions of X₁ plus independent U(−0.5, 0.5)
/// disturbances, set Y(0) = 0 exactly, and add N(0, 0.25²) noise to the
/// treated conditional mean. Treatment is Bernoulli in a logistic
/// propensity whose index coincides with the treated dimension-reduction
/// direction, so the treated index propensity equals the full propensity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelId {
    /// m₁(X) = X₁² + X₂ with X₂ = (1+2X₁)² + ζ; p(X) = σ(X₁ + X₂).
    One,
    /// m₁(X) = X₁+X₂+X₃+X₄ with X₂ = 1+X₁²+ζ₁, X₃ = (1+X₁)²+ζ₂,
    /// X₄ = (−1+X₁)²+ζ₃; p(X) = σ(0.5·(X₁+X₂+X₃+X₄)).
    Two,
    /// m₁(X) = X₂ + X₃ with X₂ = 1+X₁²+ϑ₁, X₃ = (1+X₁)(−1+X₁)+ϑ₂;
    /// p(X) = σ(X₂ + X₃).
    Three,
}

/// Standard deviation of the treated-arm outcome noise ε.
pub const EPSILON_SD: f64 = 0.25;

impl ModelId {
    pub const ALL: [ModelId; 3] = [ModelId::One, ModelId::Two, ModelId::Three];

    /// 1-based numeric id.
    pub fn index(self) -> u8 {
        match self {
            ModelId::One => 1,
            ModelId::Two => 2,
            ModelId::Three => 3,
        }
    }

    /// Covariate dimension p.
    pub fn covariate_dim(self) -> usize {
        match self {
            ModelId::One => 2,
            ModelId::Two => 4,
            ModelId::Three => 3,
        }
    }

    /// Largest per-arm index rank: Model 1 keeps the full 2-dimensional
    /// treated index; Models 2–3 reduce the treated arm to one direction.
    /// The control arm has rank 0 everywhere (Y(0) is constant).
    pub fn r_max(self) -> usize {
        match self {
            ModelId::One => 2,
            ModelId::Two => 1,
            ModelId::Three => 1,
        }
    }

    /// Analytic benchmark variance σ²_O(x₁) = Var(m₁(X) − m₀(X) | X₁ = x₁):
    /// the variance of the disturbance sum feeding m₁ − m₀, constant in x₁.
    pub fn analytic_sigma_o(self) -> f64 {
        match self {
            ModelId::One => 1.0 / 12.0,
            ModelId::Two => 3.0 / 12.0,
            ModelId::Three => 2.0 / 12.0,
        }
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "model{}", self.index())
    }
}

impl FromStr for ModelId {
    type Err = CateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1" | "model1" => Ok(ModelId::One),
            "2" | "model2" => Ok(ModelId::Two),
            "3" | "model3" => Ok(ModelId::Three),
            other => Err(CateError::invalid(format!(
                "unknown model id '{other}' (expected 1, 2, or 3)"
            ))),
        }
    }
}

/// True effect curve τ(x₁) = E[Y(1) − Y(0) | X₁ = x₁].
///
/// The disturbances are mean-zero, so τ is m₁ with each covariate replaced
/// by its conditional mean: Model 1: x₁² + (1+2x₁)²; Model 2: 3x₁² + x₁ + 3;
/// Model 3: 2x₁².
pub fn true_tau(model: ModelId, x1: f64) -> f64 {
    match model {
        ModelId::One => x1 * x1 + (1.0 + 2.0 * x1).powi(2),
        ModelId::Two => 3.0 * x1 * x1 + x1 + 3.0,
        ModelId::Three => 2.0 * x1 * x1,
    }
}

/// Unconditional treatment probability E[p(X)], by nested Gauss-Legendre
/// quadrature over (x₁, disturbances) — each uniform on (−0.5, 0.5). This
/// is the control-arm index propensity: a rank-zero index conditions on the
/// trivial σ-algebra.
fn mean_propensity(model: ModelId) -> f64 {
    static CACHE: [OnceLock<f64>; 3] = [OnceLock::new(), OnceLock::new(), OnceLock::new()];
    *CACHE[(model.index() - 1) as usize].get_or_init(|| compute_mean_propensity(model))
}

fn compute_mean_propensity(model: ModelId) -> f64 {
    match model {
        ModelId::One => integrate_gl(
            |t| integrate_gl(move |z| sigmoid(t + (1.0 + 2.0 * t).powi(2) + z), -0.5, 0.5, 32),
            -0.5,
            0.5,
            32,
        ),
        // X₁+X₂+X₃+X₄ = 3x₁² + x₁ + 3 + ζ₁ + ζ₂ + ζ₃.
        ModelId::Two => integrate_gl(
            |t| {
                integrate_gl(
                    move |z1| {
                        integrate_gl(
                            move |z2| {
                                integrate_gl(
                                    move |z3| {
                                        sigmoid(0.5 * (3.0 * t * t + t + 3.0 + z1 + z2 + z3))
                                    },
                                    -0.5,
                                    0.5,
                                    16,
                                )
                            },
                            -0.5,
                            0.5,
                            16,
                        )
                    },
                    -0.5,
                    0.5,
                    16,
                )
            },
            -0.5,
            0.5,
            16,
        ),
        // X₂+X₃ = 2x₁² + ϑ₁ + ϑ₂.
        ModelId::Three => integrate_gl(
            |t| {
                integrate_gl(
                    move |z1| {
                        integrate_gl(move |z2| sigmoid(2.0 * t * t + z1 + z2), -0.5, 0.5, 24)
                    },
                    -0.5,
                    0.5,
                    24,
                )
            },
            -0.5,
            0.5,
            24,
        ),
    }
}

/// The oracle (true means, propensity, variances, directions, samplers) for
/// one of the built-in designs.
///
/// In every design the propensity index is a positive multiple of the
/// treated direction index β₁ᵀX, so p(β₁ᵀX) = p(X) exactly; the control
/// direction has rank zero, so p(β₀ᵀX) = E[p(X)] (computed by
/// quadrature once and cached).
pub fn model_oracle(model: ModelId) -> OracleModel {
    let (m1, propensity, sample_x, directions): (
        ScalarFn,
        ScalarFn,
        ConditionalSampler,
        DirectionSet,
    ) = match model {
        ModelId::One => (
            Arc::new(|x: &[f64]| x[0] * x[0] + x[1]),
            Arc::new(|x: &[f64]| sigmoid(x[0] + x[1])),
            Arc::new(|x1: &[f64], rng: &mut dyn RngCore| {
                let t = x1[0];
                vec![t, (1.0 + 2.0 * t).powi(2) + rng.random_range(-0.5..0.5)]
            }),
            DirectionSet::known(Array2::eye(2), Array2::zeros((2, 0)))
                .expect("identity directions are valid"),
        ),
        ModelId::Two => (
            Arc::new(|x: &[f64]| x.iter().sum::<f64>()),
            Arc::new(|x: &[f64]| sigmoid(0.5 * x.iter().sum::<f64>())),
            Arc::new(|x1: &[f64], rng: &mut dyn RngCore| {
                let t = x1[0];
                vec![
                    t,
                    1.0 + t * t + rng.random_range(-0.5..0.5),
                    (1.0 + t).powi(2) + rng.random_range(-0.5..0.5),
                    (t - 1.0).powi(2) + rng.random_range(-0.5..0.5),
                ]
            }),
            DirectionSet::known(Array2::from_elem((4, 1), 0.5), Array2::zeros((4, 0)))
                .expect("unit direction is valid"),
        ),
        ModelId::Three => (
            Arc::new(|x: &[f64]| x[1] + x[2]),
            Arc::new(|x: &[f64]| sigmoid(x[1] + x[2])),
            Arc::new(|x1: &[f64], rng: &mut dyn RngCore| {
                let t = x1[0];
                vec![
                    t,
                    1.0 + t * t + rng.random_range(-0.5..0.5),
                    (1.0 + t) * (t - 1.0) + rng.random_range(-0.5..0.5),
                ]
            }),
            DirectionSet::known(
                Array2::from_shape_vec((3, 1), vec![0.0, FRAC_1_SQRT_2, FRAC_1_SQRT_2])
                    .expect("3x1 shape"),
                Array2::zeros((3, 0)),
            )
            .expect("unit direction is valid"),
        ),
    };
    let control_index_prop = mean_propensity(model);
    let m1_for_sampler = m1.clone();
    OracleModel {
        p_dim: model.covariate_dim(),
        x1_idx: vec![0],
        m1,
        m0: Arc::new(|_| 0.0),
        propensity: propensity.clone(),
        var_y1: Arc::new(|_| EPSILON_SD * EPSILON_SD),
        var_y0: Arc::new(|_| 0.0),
        index_propensity1: propensity,
        index_propensity0: Arc::new(move |_| control_index_prop),
        directions,
        tau: Arc::new(move |x1: &[f64]| true_tau(model, x1[0])),
        sample_x_given_x1: sample_x,
        sample_y1: Arc::new(move |x: &[f64], rng: &mut dyn RngCore| {
            let eps: f64 = StandardNormal.sample(&mut *rng);
            m1_for_sampler(x) + EPSILON_SD * eps
        }),
        sample_y0: Arc::new(|_: &[f64], _: &mut dyn RngCore| 0.0),
    }
}

/// Draw one synthetic sample of size `n` and return it with its oracle.
///
/// Per observation: X₁ ~ U(−0.5, 0.5), the remaining covariates through the
/// oracle's conditional sampler, D ~ Bernoulli(p(X)), and Y by the
/// observation rule Y = D·Y(1) + (1−D)·Y(0). Both potential outcomes are
/// drawn so the RNG stream advances identically regardless of the realized
/// assignment.
///
/// Fails only if the realized sample cannot form a valid [`SampleSet`]
/// (e.g. one arm came up empty at a tiny `n`).
pub fn generate_model<R: Rng>(
    model: ModelId,
    n: usize,
    rng: &mut R,
) -> Result<(SampleSet, OracleModel), CateError> {
    if n == 0 {
        return Err(CateError::invalid("sample size must be at least 1"));
    }
    let oracle = model_oracle(model);
    let p = oracle.p_dim;
    let mut x = Array2::<f64>::zeros((n, p));
    let mut y = Array1::<f64>::zeros(n);
    let mut d = vec![0u8; n];
    for i in 0..n {
        let x1 = rng.random_range(-0.5..0.5);
        let xi = (oracle.sample_x_given_x1)(&[x1], &mut *rng);
        let prob = (oracle.propensity)(&xi);
        let treat = rng.random::<f64>() < prob;
        let y1 = (oracle.sample_y1)(&xi, &mut *rng);
        let y0 = (oracle.sample_y0)(&xi, &mut *rng);
        for (j, v) in xi.iter().enumerate() {
            x[[i, j]] = *v;
        }
        y[i] = if treat { y1 } else { y0 };
        d[i] = u8::from(treat);
    }
    let data = SampleSet::new(x, y, d, vec![0])?;
    Ok((data, oracle))
}

/// How the harness supplies SRCATE's stage-one index directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirectionPolicy {
    /// Use the oracle's true directions.
    Known,
    /// Estimate each arm's direction by least squares at the oracle's
    /// ranks (supports rank ≤ 1 per arm).
    IndexLs,
}

impl fmt::Display for DirectionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DirectionPolicy::Known => "known",
            DirectionPolicy::IndexLs => "index-ls",
        })
    }
}

impl FromStr for DirectionPolicy {
    type Err = CateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "known" => Ok(DirectionPolicy::Known),
            "index-ls" | "index_ls" => Ok(DirectionPolicy::IndexLs),
            other => Err(CateError::invalid(format!(
                "unknown direction policy '{other}' (expected 'known' or 'index-ls')"
            ))),
        }
    }
}

/// Default conditioning grid for the built-in designs.
pub fn default_grid_points() -> Vec<f64> {
    vec![-0.4, -0.2, 0.0, 0.2, 0.4]
}

/// Full specification of one Monte Carlo run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    /// Which built-in design to draw from.
    pub model: ModelId,
    /// Sample size per replication (at least 20).
    pub n: usize,
    /// Number of replications R (at least 1).
    pub replications: usize,
    /// Conditioning points, each inside (−0.5, 0.5).
    pub grid: Vec<f64>,
    /// Bandwidths, kernel orders, kernel family.
    pub plan: BandwidthPlan,
    /// Estimators to run on every replication (nonempty, no duplicates).
    pub estimators: Vec<EstimatorId>,
    /// Stage-one direction source for SRCATE.
    pub direction_policy: DirectionPolicy,
    /// Propensity clip constant for the IPW estimators (default 0.01).
    pub clip: Option<f64>,
    /// Base RNG seed; replication r uses stream r+1.
    pub seed: u64,
}

impl SimConfig {
    /// A full-default run: all eight estimators, the standard grid, known
    /// directions.
    pub fn standard(
        model: ModelId,
        n: usize,
        replications: usize,
        plan: BandwidthPlan,
        seed: u64,
    ) -> Self {
        SimConfig {
            model,
            n,
            replications,
            grid: default_grid_points(),
            plan,
            estimators: EstimatorId::ALL.to_vec(),
            direction_policy: DirectionPolicy::Known,
            clip: None,
            seed,
        }
    }

    /// Validate the cross-field invariants.
    pub fn validate(&self) -> Result<(), CateError> {
        if self.n < 20 {
            return Err(CateError::invalid(format!(
                "simulation needs n >= 20, got {}",
                self.n
            )));
        }
        if self.replications == 0 {
            return Err(CateError::invalid("need at least one replication"));
        }
        if self.grid.is_empty() {
            return Err(CateError::invalid("conditioning grid must be nonempty"));
        }
        for &v in &self.grid {
            if !v.is_finite() || v <= -0.5 || v >= 0.5 {
                return Err(CateError::invalid(format!(
                    "grid point {v} lies outside the X1 support (-0.5, 0.5)"
                )));
            }
        }
        if self.estimators.is_empty() {
            return Err(CateError::invalid("estimator set must be nonempty"));
        }
        for (i, id) in self.estimators.iter().enumerate() {
            if self.estimators[..i].contains(id) {
                return Err(CateError::invalid(format!("duplicate estimator {id}")));
            }
        }
        if self.direction_policy == DirectionPolicy::IndexLs
            && self.model.r_max() > 1
            && self.estimators.contains(&EstimatorId::Srcate)
        {
            return Err(CateError::invalid(format!(
                "{} has a rank-{} treated index; least-squares direction estimation \
                 supports rank 1 only — use the 'known' policy for SRCATE",
                self.model,
                self.model.r_max()
            )));
        }
        if let Some(c) = self.clip {
            if !c.is_finite() || c <= 0.0 || c >= 0.5 {
                return Err(CateError::invalid(format!(
                    "clip constant must lie in (0, 0.5), got {c}"
                )));
            }
        }
        Ok(())
    }

    fn clip_value(&self) -> f64 {
        self.clip.unwrap_or(DEFAULT_CLIP)
    }
}

/// The correctly specified per-arm least-squares bases for PRCATE.
pub fn model_bases(model: ModelId) -> (BasisSpec, BasisSpec) {
    let arm0 = BasisSpec::new(vec![BasisTerm::Constant]).expect("constant basis is valid");
    let arm1 = match model {
        ModelId::One => vec![
            BasisTerm::Constant,
            BasisTerm::CoordSquare(0),
            BasisTerm::Coord(1),
        ],
        ModelId::Two => vec![
            BasisTerm::Constant,
            BasisTerm::Coord(0),
            BasisTerm::Coord(1),
            BasisTerm::Coord(2),
            BasisTerm::Coord(3),
        ],
        ModelId::Three => vec![
            BasisTerm::Constant,
            BasisTerm::Coord(1),
            BasisTerm::Coord(2),
        ],
    };
    (BasisSpec::new(arm1).expect("model basis is valid"), arm0)
}

fn directions_for(
    config: &SimConfig,
    data: &SampleSet,
    oracle: &OracleModel,
) -> Result<DirectionSet, CateError> {
    match config.direction_policy {
        DirectionPolicy::Known => Ok(oracle.directions.clone()),
        DirectionPolicy::IndexLs => {
            let b1 = estimate_directions(
                data,
                1,
                DirectionMethod::IndexLs { r: oracle.directions.rank(1) },
            )?;
            let b0 = estimate_directions(
                data,
                0,
                DirectionMethod::IndexLs { r: oracle.directions.rank(0) },
            )?;
            DirectionSet::new(b1, b0, DirectionSource::Estimated)
        }
    }
}

/// Evaluate a covariate-vector oracle function on an ndarray row view.
fn eval_on_row(f: &ScalarFn, row: ArrayView1<'_, f64>) -> f64 {
    match row.as_slice() {
        Some(s) => f(s),
        None => {
            let v = row.to_vec();
            f(&v)
        }
    }
}

fn run_estimator(
    id: EstimatorId,
    config: &SimConfig,
    data: &SampleSet,
    oracle: &OracleModel,
    grid: &[Vec<f64>],
) -> Result<CateCurve, CateError> {
    let plan = &config.plan;
    let clip = config.clip_value();
    match id {
        EstimatorId::Orcate => {
            let m1 = oracle.m1.clone();
            let m0 = oracle.m0.clone();
            orcate(
                data,
                move |row: ArrayView1<'_, f64>| eval_on_row(&m1, row) - eval_on_row(&m0, row),
                grid,
                plan,
            )
        }
        EstimatorId::Prcate => {
            let (b1, b0) = model_bases(config.model);
            prcate(data, &b1, &b0, grid, plan)
        }
        EstimatorId::Nrcate => nrcate(data, grid, plan),
        EstimatorId::Srcate => {
            let dirs = directions_for(config, data, oracle)?;
            srcate(data, &dirs, grid, plan)
        }
        EstimatorId::Ocate => {
            let p_fn = oracle.propensity.clone();
            let prop = PropensityModel::from_true_fn(move |x: &[f64]| p_fn(x)).with_clip(clip)?;
            ipw_cate(data, &prop, grid, plan)
        }
        EstimatorId::Pcate => {
            let mut terms = vec![BasisTerm::Constant];
            terms.extend((0..data.p()).map(BasisTerm::Coord));
            let basis = BasisSpec::new(terms)?;
            let prop = fit_propensity_logistic_with_clip(data, &basis, clip)?;
            ipw_cate(data, &prop, grid, plan)
        }
        EstimatorId::Scate => {
            let kernel = make_kernel(plan.family(), plan.s4())?;
            let prop = fit_propensity_single_index_with_clip(data, plan.h4(), &kernel, clip)?;
            ipw_cate(data, &prop, grid, plan)
        }
        EstimatorId::Ncate => {
            let kernel = make_product_kernel(plan.family(), plan.s2(), data.p())?;
            let prop = fit_propensity_nonparametric_with_clip(data, plan.h2(), &kernel, clip)?;
            ipw_cate(data, &prop, grid, plan)
        }
    }
}

/// One replication: generate a sample, run every configured estimator.
/// Failures are per-estimator so one estimator's degeneracy does not poison
/// the others; a generation failure drops the replication for all of them.
fn replicate_once(
    config: &SimConfig,
    grid: &[Vec<f64>],
    rep: usize,
) -> Vec<Result<Vec<f64>, CateError>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(rep as u64 + 1);
    match generate_model(config.model, config.n, &mut rng) {
        Err(e) => {
            let msg = format!("replication {rep}: sample generation failed: {e}");
            config
                .estimators
                .iter()
                .map(|_| Err(CateError::invalid(msg.clone())))
                .collect()
        }
        Ok((data, oracle)) => config
            .estimators
            .iter()
            .map(|id| {
                run_estimator(*id, config, &data, &oracle, grid)
                    .map(|curve| curve.estimates().to_vec())
            })
            .collect(),
    }
}

/// Aggregates for one (estimator, grid point) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SimCell {
    /// Conditioning point.
    pub x1: f64,
    /// Sample SD of T over the used replications ((R−1) denominator).
    pub sd: f64,
    /// Mean of T.
    pub bias: f64,
    /// Mean of T².
    pub mse: f64,
}

/// Per-estimator aggregates over all replications.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorSummary {
    pub estimator: EstimatorId,
    /// Replications that produced a curve.
    pub replications_used: usize,
    /// Replications dropped by an error (recorded, never silent).
    pub dropped: usize,
    /// The first error message among dropped replications, if any.
    pub first_error: Option<String>,
    /// One cell per grid point, in grid order.
    pub cells: Vec<SimCell>,
}

/// Monte Carlo distribution summary of T(x₁) = √(n·h₁ᵏ)·(τ̂(x₁) − τ(x₁)).
#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    config: SimConfig,
    summaries: Vec<EstimatorSummary>,
}

/// Run all replications of a configuration, in parallel, deterministically.
///
/// Replication r draws from RNG stream (seed, r+1); results are collected
/// in replication order and folded sequentially, so the report is
/// bit-identical for a fixed config regardless of worker count. An
/// estimator that drops every replication is a hard error.
pub fn run_replications(config: &SimConfig) -> Result<SimReport, CateError> {
    config.validate()?;
    let grid: Vec<Vec<f64>> = config.grid.iter().map(|v| vec![*v]).collect();
    let k = model_oracle(config.model).k();
    let scale = (config.n as f64 * config.plan.h1().powi(k as i32)).sqrt();
    let per_rep: Vec<Vec<Result<Vec<f64>, CateError>>> = (0..config.replications)
        .into_par_iter()
        .map(|rep| replicate_once(config, &grid, rep))
        .collect();
    let mut summaries = Vec::with_capacity(config.estimators.len());
    for (e_idx, &id) in config.estimators.iter().enumerate() {
        let mut used = 0usize;
        let mut dropped = 0usize;
        let mut first_error: Option<String> = None;
        let mut t_acc = vec![Welford::new(); config.grid.len()];
        let mut t2_acc = vec![Welford::new(); config.grid.len()];
        for rep_results in &per_rep {
            match &rep_results[e_idx] {
                Ok(estimates) => {
                    used += 1;
                    for (j, (&tau_hat, &x1)) in
                        estimates.iter().zip(&config.grid).enumerate()
                    {
                        let t = scale * (tau_hat - true_tau(config.model, x1));
                        t_acc[j].push(t);
                        t2_acc[j].push(t * t);
                    }
                }
                Err(e) => {
                    dropped += 1;
                    if first_error.is_none() {
                        first_error = Some(e.to_string());
                    }
                }
            }
        }
        if used == 0 {
            return Err(CateError::invalid(format!(
                "estimator {id} dropped every replication; first error: {}",
                first_error.as_deref().unwrap_or("unknown")
            )));
        }
        let cells = config
            .grid
            .iter()
            .zip(t_acc.iter().zip(&t2_acc))
            .map(|(&x1, (t, t2))| SimCell {
                x1,
                sd: t.sample_sd(),
                bias: t.mean(),
                mse: t2.mean(),
            })
            .collect();
        summaries.push(EstimatorSummary {
            estimator: id,
            replications_used: used,
            dropped,
            first_error,
            cells,
        });
    }
    Ok(SimReport { config: config.clone(), summaries })
}

impl SimReport {
    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn summaries(&self) -> &[EstimatorSummary] {
        &self.summaries
    }

    /// The summary for one estimator, if it was configured.
    pub fn summary(&self, id: EstimatorId) -> Option<&EstimatorSummary> {
        self.summaries.iter().find(|s| s.estimator == id)
    }

    /// Total dropped replications across estimators.
    pub fn total_dropped(&self) -> usize {
        self.summaries.iter().map(|s| s.dropped).sum()
    }

    /// Long-format CSV: one row per (estimator, grid point).
    pub fn to_csv_string(&self) -> String {
        let mut out =
            String::from("model,estimator,x1,sd,bias,mse,replications_used,dropped\n");
        for s in &self.summaries {
            for cell in &s.cells {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    self.config.model,
                    s.estimator,
                    format_sig9(cell.x1),
                    format_sig9(cell.sd),
                    format_sig9(cell.bias),
                    format_sig9(cell.mse),
                    s.replications_used,
                    s.dropped
                ));
            }
        }
        out
    }

    /// Aligned text table: one block per metric, estimators as columns.
    pub fn to_text_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{} | n = {} | R = {} | {}\n",
            self.config.model, self.config.n, self.config.replications, self.config.plan
        ));
        for name in ["SD", "BIAS", "MSE"] {
            let pick = |c: &SimCell| match name {
                "SD" => c.sd,
                "BIAS" => c.bias,
                _ => c.mse,
            };
            out.push_str(&format!("\n{name}\n{:>8}", "x1"));
            for s in &self.summaries {
                out.push_str(&format!("{:>10}", s.estimator.as_str()));
            }
            out.push('\n');
            for (j, &x1) in self.config.grid.iter().enumerate() {
                out.push_str(&format!("{x1:>8.2}"));
                for s in &self.summaries {
                    out.push_str(&format!("{:>10.3}", pick(&s.cells[j])));
                }
                out.push('\n');
            }
        }
        let dropped: Vec<String> = self
            .summaries
            .iter()
            .filter(|s| s.dropped > 0)
            .map(|s| format!("{}: {}", s.estimator, s.dropped))
            .collect();
        out.push_str(&format!(
            "\ndropped replications: {}\n",
            if dropped.is_empty() { "none".to_string() } else { dropped.join(", ") }
        ));
        out
    }
}

/// One parsed row of a report CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub estimator: EstimatorId,
    pub x1: f64,
    pub sd: f64,
    pub bias: f64,
    pub mse: f64,
    pub replications_used: usize,
    pub dropped: usize,
}

/// Parse a CSV produced by [`SimReport::to_csv_string`].
pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>, CateError> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CateError::invalid("empty report CSV"))?;
    if header.trim() != "model,estimator,x1,sd,bias,mse,replications_used,dropped" {
        return Err(CateError::invalid(format!(
            "unexpected report header: {header}"
        )));
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 8 {
            return Err(CateError::invalid(format!(
                "report row {} has {} fields, expected 8",
                lineno + 2,
                cells.len()
            )));
        }
        let num = |idx: usize| -> Result<f64, CateError> {
            cells[idx].trim().parse::<f64>().map_err(|e| {
                CateError::invalid(format!(
                    "report row {}, field {}: {e}",
                    lineno + 2,
                    idx + 1
                ))
            })
        };
        let int = |idx: usize| -> Result<usize, CateError> {
            cells[idx].trim().parse::<usize>().map_err(|e| {
                CateError::invalid(format!(
                    "report row {}, field {}: {e}",
                    lineno + 2,
                    idx + 1
                ))
            })
        };
        rows.push(ReportRow {
            model: cells[0].trim().to_string(),
            estimator: cells[1].trim().parse()?,
            x1: num(2)?,
            sd: num(3)?,
            bias: num(4)?,
            mse: num(5)?,
            replications_used: int(6)?,
            dropped: int(7)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn order_defaults_round_up_to_even() {
        let o = KernelOrders::defaults(2, 2);
        assert_eq!((o.s1, o.s2, o.s4), (4, 2, 2));
        let o = KernelOrders::defaults(4, 1);
        assert_eq!((o.s1, o.s2, o.s4), (6, 4, 2));
        let o = KernelOrders::defaults(3, 1);
        assert_eq!((o.s1, o.s2, o.s4), (6, 4, 2));
        let o = KernelOrders::defaults(2, 0);
        assert_eq!((o.s1, o.s2, o.s4), (4, 2, 2));
    }

    #[test]
    fn rule_exponents_for_the_three_designs() {
        // k=1, p=2, r_max=2: exponents 1/9, 1/4, 1/4.
        let o = KernelOrders::defaults(2, 2);
        let (h1, e1) = bandwidth_rule(BandwidthRole::H1, 0.05, 200, 1, 2, 2, &o).unwrap();
        assert_eq!(e1, (1, 9));
        assert_abs_diff_eq!(h1, 0.05 * 200f64.powf(-1.0 / 9.0), epsilon = 1e-15);
        // The worked value: 0.05·200^(−1/9) ≈ 0.02775.
        assert_abs_diff_eq!(h1, 0.02775, epsilon = 5e-5);
        let (_, e2) = bandwidth_rule(BandwidthRole::H2, 0.5, 200, 1, 2, 2, &o).unwrap();
        assert_eq!(e2, (1, 4));
        let (_, e4) = bandwidth_rule(BandwidthRole::H4, 0.4, 200, 1, 2, 2, &o).unwrap();
        assert_eq!(e4, (1, 4));
        // k=1, p=4, r_max=1: exponents 1/13, 1/8, 1/3.
        let o = KernelOrders::defaults(4, 1);
        let (_, e1) = bandwidth_rule(BandwidthRole::H1, 0.02, 500, 1, 4, 1, &o).unwrap();
        assert_eq!(e1, (1, 13));
        let (_, e2) = bandwidth_rule(BandwidthRole::H2, 0.15, 500, 1, 4, 1, &o).unwrap();
        assert_eq!(e2, (1, 8));
        let (_, e4) = bandwidth_rule(BandwidthRole::H4, 0.1, 500, 1, 4, 1, &o).unwrap();
        assert_eq!(e4, (1, 3));
    }

    #[test]
    fn rule_scales_as_a_power_law() {
        let o = KernelOrders::defaults(2, 2);
        let (h_n, _) = bandwidth_rule(BandwidthRole::H1, 0.05, 200, 1, 2, 2, &o).unwrap();
        let (h_4n, _) = bandwidth_rule(BandwidthRole::H1, 0.05, 800, 1, 2, 2, &o).unwrap();
        assert_abs_diff_eq!(h_4n / h_n, 4f64.powf(-1.0 / 9.0), epsilon = 1e-12);
    }

    #[test]
    fn plan_constructors_validate() {
        let o = KernelOrders::defaults(2, 2);
        assert!(BandwidthPlan::explicit(0.1, 0.2, 0.3, o).is_ok());
        assert!(BandwidthPlan::explicit(0.0, 0.2, 0.3, o).is_err());
        assert!(BandwidthPlan::explicit(0.1, f64::NAN, 0.3, o).is_err());
        let bad = KernelOrders { s1: 3, s2: 2, s4: 2 };
        assert!(BandwidthPlan::explicit(0.1, 0.2, 0.3, bad).is_err());
        assert!(bandwidth_rule(BandwidthRole::H1, -0.1, 200, 1, 2, 2, &o).is_err());
    }

    #[test]
    fn plan_records_provenance() {
        let o = KernelOrders::defaults(2, 2);
        let plan = BandwidthPlan::from_rules(200, 1, 2, 2, (0.05, 0.5, 0.4), o).unwrap();
        assert_eq!(
            plan.provenance(BandwidthRole::H1),
            BandwidthProvenance::Rule { a: 0.05, exponent: (1, 9) }
        );
        assert_eq!(
            plan.provenance(BandwidthRole::H2),
            BandwidthProvenance::Rule { a: 0.5, exponent: (1, 4) }
        );
        let text = plan.to_string();
        assert!(text.contains("n^(-1/9)"), "display: {text}");
        let explicit = BandwidthPlan::explicit(0.1, 0.2, 0.3, o).unwrap();
        assert_eq!(explicit.provenance(BandwidthRole::H4), BandwidthProvenance::Explicit);
        // Exponent override constructor.
        let forced = BandwidthPlan::from_rule_exponents(
            500,
            [(0.02, (1, 13)), (0.16, (1, 8)), (0.18, (1, 3))],
            KernelOrders::defaults(3, 1),
        )
        .unwrap();
        assert_abs_diff_eq!(forced.h2(), 0.16 * 500f64.powf(-1.0 / 8.0), epsilon = 1e-15);
    }

    #[test]
    fn model_ids_parse_and_describe() {
        assert_eq!("1".parse::<ModelId>().unwrap(), ModelId::One);
        assert_eq!("model2".parse::<ModelId>().unwrap(), ModelId::Two);
        assert_eq!(" 3 ".parse::<ModelId>().unwrap(), ModelId::Three);
        assert!("4".parse::<ModelId>().is_err());
        assert_eq!(ModelId::Two.to_string(), "model2");
        assert_eq!(
            ModelId::ALL.map(ModelId::covariate_dim),
            [2, 4, 3]
        );
        assert_eq!(ModelId::ALL.map(ModelId::r_max), [2, 1, 1]);
    }

    #[test]
    fn true_tau_spot_values() {
        assert_abs_diff_eq!(true_tau(ModelId::One, -0.4), 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(true_tau(ModelId::One, 0.2), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(true_tau(ModelId::Two, 0.0), 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(true_tau(ModelId::Two, 0.2), 3.32, epsilon = 1e-12);
        assert_abs_diff_eq!(true_tau(ModelId::Three, 0.0), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(true_tau(ModelId::Three, 0.3), 0.18, epsilon = 1e-12);
    }

    #[test]
    fn analytic_sigma_o_values() {
        assert_abs_diff_eq!(ModelId::One.analytic_sigma_o(), 1.0 / 12.0, epsilon = 1e-15);
        assert_abs_diff_eq!(ModelId::Two.analytic_sigma_o(), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(ModelId::Three.analytic_sigma_o(), 1.0 / 6.0, epsilon = 1e-15);
    }

    /// Support bounds for the disturbance of each non-X₁ covariate given x₁.
    fn latent_residual(model: ModelId, x1: f64, col: usize, value: f64) -> f64 {
        match (model, col) {
            (ModelId::One, 1) => value - (1.0 + 2.0 * x1).powi(2),
            (ModelId::Two, 1) | (ModelId::Three, 1) => value - (1.0 + x1 * x1),
            (ModelId::Two, 2) => value - (1.0 + x1).powi(2),
            (ModelId::Two, 3) => value - (x1 - 1.0).powi(2),
            (ModelId::Three, 2) => value - (x1 * x1 - 1.0),
            _ => unreachable!("column {col} is not latent-driven"),
        }
    }

    #[test]
    fn generated_samples_match_the_designs() {
        for (seed, model) in [(71u64, ModelId::One), (72, ModelId::Two), (73, ModelId::Three)] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 100_000;
            let (data, oracle) = generate_model(model, n, &mut rng).unwrap();
            assert_eq!(data.p(), model.covariate_dim());
            assert_eq!(data.x1_idx(), &[0]);
            let mut treated_resid_mean = 0.0;
            let mut treated = 0usize;
            for i in 0..n {
                let row = data.row(i);
                let x1 = row[0];
                assert!((-0.5..0.5).contains(&x1), "{model}: X1 out of support");
                for col in 1..model.covariate_dim() {
                    let z = latent_residual(model, x1, col, row[col]);
                    assert!(
                        (-0.5..=0.5).contains(&z),
                        "{model}: column {col} disturbance {z} outside [-0.5, 0.5]"
                    );
                }
                let xi: Vec<f64> = row.to_vec();
                if data.d()[i] == 1 {
                    treated += 1;
                    treated_resid_mean +=
                        (data.y()[i] - (oracle.m1)(&xi) - treated_resid_mean) / treated as f64;
                } else {
                    assert_eq!(data.y()[i], 0.0, "{model}: control outcomes are exactly 0");
                }
            }
            // Mean treatment share matches the quadrature constant E[p(X)]
            // (the control-arm index propensity) well within MC noise.
            let share = treated as f64 / n as f64;
            let target = (oracle.index_propensity0)(&vec![0.0; oracle.p_dim]);
            assert!(
                (share - target).abs() < 0.01,
                "{model}: mean(D) = {share:.4} vs E[p] = {target:.4}"
            );
            // Treated outcomes center on m1(X).
            assert!(
                treated_resid_mean.abs() < 0.01,
                "{model}: treated residual mean {treated_resid_mean:.4}"
            );
        }
    }

    #[test]
    fn model_three_thin_bin_recovers_the_effect() {
        let mut rng = ChaCha8Rng::seed_from_u64(74);
        let n = 100_000;
        let (data, oracle) = generate_model(ModelId::Three, n, &mut rng).unwrap();
        let mut mean_effect = 0.0;
        let mut mean_target = 0.0;
        let mut count = 0usize;
        for i in 0..n {
            let row = data.row(i);
            if row[0].abs() < 0.05 {
                count += 1;
                let xi: Vec<f64> = row.to_vec();
                mean_effect += (oracle.delta_m(&xi) - mean_effect) / count as f64;
                mean_target += (2.0 * row[0] * row[0] - mean_target) / count as f64;
            }
        }
        assert!(count > 5_000, "thin bin unexpectedly empty: {count}");
        // E[X₂+X₃ | bin] = 2·E[X₁²|bin] ≈ 2·(0.05)²/3 ≈ 0.00167; disturbance
        // noise has SD ≈ 0.41/√count ≈ 0.004.
        assert_abs_diff_eq!(mean_target, 0.00167, epsilon = 3e-4);
        assert!(
            (mean_effect - mean_target).abs() < 0.015,
            "bin mean {mean_effect:.5} vs analytic {mean_target:.5}"
        );
    }

    #[test]
    fn oracle_directions_and_constants_are_consistent() {
        let oracle = model_oracle(ModelId::Two);
        assert_eq!(oracle.directions.rank(1), 1);
        assert_eq!(oracle.directions.rank(0), 0);
        // Unit-norm treated direction.
        let b1 = oracle.directions.beta1();
        let norm: f64 = b1.iter().map(|v| v * v).sum::<f64>();
        assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-12);
        // The treated index propensity coincides with the full propensity.
        let mut rng = ChaCha8Rng::seed_from_u64(75);
        for _ in 0..5 {
            let x = (oracle.sample_x_given_x1)(&[rng.random_range(-0.5..0.5)], &mut rng);
            assert_eq!((oracle.index_propensity1)(&x), (oracle.propensity)(&x));
        }
        // Quadrature constants are probabilities in a plausible band.
        let e_p1 = mean_propensity(ModelId::One);
        let e_p2 = mean_propensity(ModelId::Two);
        let e_p3 = mean_propensity(ModelId::Three);
        assert!((0.55..0.85).contains(&e_p1), "model1 E[p] = {e_p1}");
        assert!((0.75..0.95).contains(&e_p2), "model2 E[p] = {e_p2}");
        assert!((0.45..0.65).contains(&e_p3), "model3 E[p] = {e_p3}");
    }

    fn small_config(estimators: Vec<EstimatorId>, replications: usize) -> SimConfig {
        let plan =
            BandwidthPlan::explicit(0.1, 0.25, 0.25, KernelOrders::defaults(2, 2)).unwrap();
        SimConfig {
            model: ModelId::One,
            n: 80,
            replications,
            grid: vec![-0.2, 0.0, 0.2],
            plan,
            estimators,
            direction_policy: DirectionPolicy::Known,
            clip: None,
            seed: 2024,
        }
    }

    #[test]
    fn config_validation_rejects_bad_inputs() {
        let ok = small_config(vec![EstimatorId::Orcate], 2);
        assert!(ok.validate().is_ok());
        let mut bad = ok.clone();
        bad.n = 19;
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.replications = 0;
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.grid = vec![0.5];
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.grid.clear();
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.estimators = vec![EstimatorId::Orcate, EstimatorId::Orcate];
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.clip = Some(0.5);
        assert!(bad.validate().is_err());
        // Model 1's rank-2 treated index cannot be least-squares estimated.
        let mut bad = ok.clone();
        bad.estimators = vec![EstimatorId::Srcate];
        bad.direction_policy = DirectionPolicy::IndexLs;
        assert!(bad.validate().is_err());
        // But the policy is fine for rank-1 models.
        let mut fine = bad.clone();
        fine.model = ModelId::Two;
        assert!(fine.validate().is_ok());
        assert_eq!(
            "index-ls".parse::<DirectionPolicy>().unwrap(),
            DirectionPolicy::IndexLs
        );
    }

    #[test]
    fn single_replication_has_degenerate_moments() {
        let report = run_replications(&small_config(vec![EstimatorId::Orcate], 1)).unwrap();
        let s = report.summary(EstimatorId::Orcate).unwrap();
        assert_eq!((s.replications_used, s.dropped), (1, 0));
        for cell in &s.cells {
            assert_eq!(cell.sd, 0.0);
            assert_abs_diff_eq!(cell.mse, cell.bias * cell.bias, epsilon = 1e-12);
        }
    }

    #[test]
    fn mse_identity_holds_per_cell() {
        let config = small_config(vec![EstimatorId::Orcate, EstimatorId::Prcate], 25);
        let report = run_replications(&config).unwrap();
        for s in report.summaries() {
            let r = s.replications_used as f64;
            for cell in &s.cells {
                let recomposed = cell.bias * cell.bias + cell.sd * cell.sd * (r - 1.0) / r;
                assert_abs_diff_eq!(cell.mse, recomposed, epsilon = 1e-10);
                assert!(cell.mse.is_finite() && cell.sd.is_finite());
            }
        }
    }

    #[test]
    fn all_eight_estimators_run_and_report() {
        let config = small_config(EstimatorId::ALL.to_vec(), 3);
        let report = run_replications(&config).unwrap();
        assert_eq!(report.summaries().len(), 8);
        for s in report.summaries() {
            assert_eq!((s.replications_used, s.dropped), (3, 0), "{}", s.estimator);
            assert_eq!(s.cells.len(), 3);
            for cell in &s.cells {
                assert!(cell.sd.is_finite() && cell.bias.is_finite() && cell.mse.is_finite());
            }
        }
        assert_eq!(report.total_dropped(), 0);
        let text = report.to_text_table();
        assert!(text.contains("SD") && text.contains("ORCATE") && text.contains("none"));
    }

    #[test]
    fn reports_are_deterministic_and_round_trip_through_csv() {
        let config = small_config(vec![EstimatorId::Orcate, EstimatorId::Ocate], 4);
        let a = run_replications(&config).unwrap();
        let b = run_replications(&config).unwrap();
        assert_eq!(a, b);
        let csv = a.to_csv_string();
        assert_eq!(csv, b.to_csv_string());
        let rows = parse_report_csv(&csv).unwrap();
        assert_eq!(rows.len(), 2 * config.grid.len());
        let mut idx = 0;
        for s in a.summaries() {
            for cell in &s.cells {
                let row = &rows[idx];
                idx += 1;
                assert_eq!(row.model, "model1");
                assert_eq!(row.estimator, s.estimator);
                assert_abs_diff_eq!(row.x1, cell.x1, epsilon = 1e-9);
                assert_abs_diff_eq!(row.sd, cell.sd, epsilon = 1e-7 * cell.sd.abs().max(1.0));
                assert_abs_diff_eq!(
                    row.bias,
                    cell.bias,
                    epsilon = 1e-7 * cell.bias.abs().max(1.0)
                );
                assert_abs_diff_eq!(row.mse, cell.mse, epsilon = 1e-7 * cell.mse.abs().max(1.0));
                assert_eq!(row.replications_used, s.replications_used);
                assert_eq!(row.dropped, s.dropped);
            }
        }
        assert!(parse_report_csv("bogus\n1,2").is_err());
    }

    #[test]
    fn index_ls_policy_runs_srcate_on_rank_one_models() {
        let plan =
            BandwidthPlan::explicit(0.12, 0.3, 0.3, KernelOrders::defaults(3, 1)).unwrap();
        let config = SimConfig {
            model: ModelId::Three,
            n: 120,
            replications: 2,
            grid: vec![0.0, 0.25],
            plan,
            estimators: vec![EstimatorId::Srcate],
            direction_policy: DirectionPolicy::IndexLs,
            clip: None,
            seed: 9,
        };
        let report = run_replications(&config).unwrap();
        let s = report.summary(EstimatorId::Srcate).unwrap();
        assert_eq!((s.replications_used, s.dropped), (2, 0));
    }
}

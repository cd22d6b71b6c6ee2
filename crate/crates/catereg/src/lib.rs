//! Two-step estimation of the conditional average treatment effect (CATE)
//! τ(x₁) = E[Y(1) − Y(0) | X₁ = x₁].
//!
//! ## Purpose
//!
//! Stage one builds per-observation pseudo-outcomes from one of several
//! structures on the arm-wise conditional means m₁, m₀ (known effect,
//! parametric least squares, single-index smoothing, or fully nonparametric
//! smoothing) or from an inverse-probability-weighting transform. Stage two
//! smooths the pseudo-outcomes against the conditioning covariates X₁ with a
//! Nadaraya-Watson ratio and a (possibly higher-order) kernel.
//!
//! ## Modules
//!
//! - [`kernels`]: Gaussian-derived and compact polynomial kernels of even
//!   order, product kernels, moment verification, L2 norms.
//! - [`smoothing`]: Nadaraya-Watson regression, kernel density estimation,
//!   arm-subsample conditional-mean functions.
//! - [`firststage`]: parametric outcome fits, logistic / single-index /
//!   nonparametric propensity models, dimension-reduction directions.
//! - [`estimators`]: the shared second-step smoother, the four
//!   regression-based estimators (ORCATE, PRCATE, SRCATE, NRCATE) and the
//!   four IPW comparators (OCATE, PCATE, SCATE, NCATE).
//! - [`asymptotics`]: influence functions, asymptotic-variance evaluators
//!   with Monte Carlo standard errors, and the efficiency-ranking check.
//! - [`simulation`]: the three built-in data-generating models, bandwidth
//!   rate rules, and the deterministic parallel replication harness.
//! - [`cli`]: config parsing and the `simulate` / `estimate` /
//!   `kernel-check` subcommands.
//!
//! ## Invariants
//!
//! - Every constructed kernel has its moment conditions verified numerically
//!   at construction time.
//! - Simulation output is bit-identical for a fixed seed regardless of the
//!   number of worker threads (per-replication counter-based RNG streams and
//!   an ordered reduce).
//! - Degenerate kernel mass raises [`error::CateError::DegenerateMass`]
//!   rather than silently emitting 0/0.

pub mod asymptotics;
pub mod cli;
pub mod error;
pub mod estimators;
pub mod firststage;
pub mod kernels;
pub mod quad;
pub mod simulation;
pub mod smoothing;

pub use error::CateError;

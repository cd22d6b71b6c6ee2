//! Crate-wide error type.

/// Errors raised by kernel construction, smoothing, fitting, and the
/// simulation harness.
#[derive(Debug, Clone, thiserror::Error)]
pub enum CateError {
    /// Kernel orders must be positive even integers.
    #[error("kernel order must be a positive even integer, got {0}")]
    InvalidKernelOrder(usize),

    /// A constructed kernel failed its own moment verification.
    #[error("kernel moment check failed: moment {moment} = {value:.3e}, expected {expected}")]
    KernelMomentCheck {
        moment: usize,
        value: f64,
        expected: &'static str,
    },

    /// Panel refinement stopped improving before reaching tolerance.
    #[error("quadrature did not converge after {refinements} refinements (last delta {delta:.3e})")]
    QuadratureNonConvergence { refinements: usize, delta: f64 },

    /// Kernel mass at a query point is zero or cancels catastrophically.
    #[error("degenerate kernel mass at {context} (|sum w| = {mass:.3e}, total |w| = {total_abs:.3e})")]
    DegenerateMass {
        context: String,
        mass: f64,
        total_abs: f64,
    },

    /// Normal equations (or a Newton step) are singular beyond tolerance.
    #[error("rank-deficient system in {0}")]
    RankDeficient(String),

    /// Logistic likelihood diverges: the arms are (quasi-)separated.
    #[error("logistic fit diverged after {iterations} iterations: arms appear separated")]
    Separation { iterations: usize },

    /// Newton iterations exhausted without meeting the gradient tolerance.
    #[error("logistic fit did not converge within {0} iterations")]
    MaxIterations(usize),

    /// index-ls direction estimation only supports rank-1 subspaces.
    #[error("index-ls direction estimation supports rank 1 only, requested rank {0}")]
    UnsupportedRank(usize),

    /// A conditional sampler produced X whose X₁ block disagrees with the
    /// conditioning point.
    #[error("conditional sampler drew X1 = {got} while conditioning on X1 = {expected}")]
    SamplerMismatch { expected: f64, got: f64 },

    /// Input validation failure (shapes, finiteness, domains).
    #[error("invalid input: {0}")]
    Invalid(String),
}

impl CateError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        CateError::Invalid(msg.into())
    }
}

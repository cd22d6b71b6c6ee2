//! One-dimensional numerical quadrature.
//!
//! ## Purpose
//!
//! Two schemes cover every integral in this crate:
//!
//! - fixed-degree Gauss-Legendre on a finite interval, exact for the
//!   polynomial integrands of the compact kernel family;
//! - a composite Gauss-Legendre rule with panel doubling until two
//!   successive refinements agree, for the smooth rapidly decaying
//!   integrands of the Gaussian kernel family.
//!
//! ## Design notes
//!
//! Nodes come from Newton iteration on the Legendre recurrence, the
//! textbook construction; no external quadrature dependency is warranted
//! for two rules and a node table.

use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::error::CateError;

/// Gauss-Legendre nodes and weights on [-1, 1].
///
/// Nodes are returned in ascending order. Panics if `n == 0`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n > 0, "node count must be positive");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Tricomi-style initial guess, then Newton on P_n.
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let step = p / d;
            x -= step;
            if step.abs() < 1e-15 {
                let (_, d) = legendre_with_derivative(n, x);
                dp = d;
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Legendre polynomial P_n(x) and its derivative via the three-term
/// recurrence.
fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 1..n {
        let kf = k as f64;
        let p2 = ((2.0 * kf + 1.0) * x * p1 - kf * p0) / (kf + 1.0);
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Integrate `f` over [a, b] with an `n`-node Gauss-Legendre rule.
pub fn integrate_gl<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let (nodes, weights) = gauss_legendre(n);
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let mut sum = 0.0;
    for (x, w) in nodes.iter().zip(&weights) {
        sum += w * f(mid + half * x);
    }
    half * sum
}

fn gl16() -> &'static (Vec<f64>, Vec<f64>) {
    static TABLE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    TABLE.get_or_init(|| gauss_legendre(16))
}

fn composite_gl16<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, panels: usize) -> f64 {
    let (nodes, weights) = gl16();
    let width = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let lo = a + p as f64 * width;
        let mid = lo + 0.5 * width;
        let half = 0.5 * width;
        let mut sum = 0.0;
        for (x, w) in nodes.iter().zip(weights) {
            sum += w * f(mid + half * x);
        }
        total += half * sum;
    }
    total
}

/// Integrate `f` over [a, b], doubling the panel count of a composite
/// 16-node Gauss-Legendre rule until two successive refinements agree to
/// `tol` (relative to max(1, |value|)).
pub fn integrate_adaptive<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    tol: f64,
) -> Result<f64, CateError> {
    const MAX_REFINEMENTS: usize = 16;
    let mut panels = 1;
    let mut prev = composite_gl16(f, a, b, panels);
    let mut delta = f64::INFINITY;
    for _ in 0..MAX_REFINEMENTS {
        panels *= 2;
        let cur = composite_gl16(f, a, b, panels);
        delta = (cur - prev).abs();
        if delta <= tol * cur.abs().max(1.0) {
            return Ok(cur);
        }
        prev = cur;
    }
    Err(CateError::QuadratureNonConvergence {
        refinements: MAX_REFINEMENTS,
        delta,
    })
}

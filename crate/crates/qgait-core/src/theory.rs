//! Gradient-moment analysis of the soft quantizer.
//!
//! With `z` uniform on `[-k/2, k/2]` and `G(z) = tanh(z)/(2·tanh(k/2))`,
//! the gradient `∇G(z) = ½·coth(k/2)·sech²(z)` has closed-form moments
//!
//! * squared first moment `E²[∇G] = 1/k²` (< 1 for k > 1), and
//! * second moment `E[‖∇G‖²] = (cosh k + 2)/(3k·sinh k)` (> 0),
//!
//! which this module evaluates and verifies against a composite
//! Gauss–Legendre quadrature oracle. The smoothness/step-size descent
//! inequality behind these quantities has no computable artifact beyond
//! the two moments and is intentionally not modelled.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;
use crate::quant::soft_theta;

/// One row of the exported moment curves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub k: f64,
    pub first_moment_sq: f64,
    pub second_moment: f64,
}

/// Which moment the quadrature oracle integrates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Moment {
    First,
    Second,
}

fn check_k(k: f64) -> Result<()> {
    if !(k >= 1.0) || !k.is_finite() {
        return Err(Error::Domain(format!("k must be >= 1, got {k}")));
    }
    Ok(())
}

/// Squared expectation of the soft-quantizer gradient: `1/k²`.
pub fn expected_grad_mean_sq(k: f64) -> Result<f64> {
    check_k(k)?;
    Ok(1.0 / (k * k))
}

/// Expected squared norm of the soft-quantizer gradient:
/// `(cosh k + 2)/(3k·sinh k)`.
pub fn expected_grad_sq_norm(k: f64) -> Result<f64> {
    check_k(k)?;
    Ok((fmath::cosh(k) + 2.0) / (3.0 * k * fmath::sinh(k)))
}

/// `∇G(z) = ½·coth(k/2)·sech²(z)`.
fn grad_g(z: f64, k: f64) -> f64 {
    0.5 / fmath::tanh(k / 2.0) * fmath::sech2(z)
}

/// Composite Gauss–Legendre quadrature of `(∇G)^p · 1/k` over
/// `[-k/2, k/2]` (first moment squared afterwards). 256 panels of an
/// 8-point rule keep the absolute error far below 1e-10 for these
/// integrands.
pub fn quadrature_oracle(k: f64, moment: Moment) -> Result<f64> {
    check_k(k)?;
    let rule = GaussLegendre::new(8)?;
    let panels = 256;
    let (a, b) = (-k / 2.0, k / 2.0);
    let width = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let lo = a + p as f64 * width;
        let hi = lo + width;
        total += rule.integrate(lo, hi, |z| {
            let g = grad_g(z, k);
            let val = match moment {
                Moment::First => g,
                Moment::Second => g * g,
            };
            val / k
        });
    }
    Ok(match moment {
        Moment::First => total * total,
        Moment::Second => total,
    })
}

/// n-point Gauss–Legendre rule on [-1, 1]; nodes found by Newton
/// iteration on the Legendre polynomial.
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Config("Gauss-Legendre needs at least 2 points".into()));
        }
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n {
            // Chebyshev-like initial guess, then Newton on P_n.
            let mut x = fmath::cos(core::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5));
            for _ in 0..100 {
                let (p, dp) = legendre(n, x);
                let dx = p / dp;
                x -= dx;
                if fmath::fabs(dx) < 1e-15 {
                    break;
                }
            }
            let (_, dp) = legendre(n, x);
            nodes[i] = x;
            weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
        }
        Ok(GaussLegendre { nodes, weights })
    }

    pub fn integrate(&self, a: f64, b: f64, f: impl Fn(f64) -> f64) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let mut s = 0.0;
        for (&x, &w) in self.nodes.iter().zip(&self.weights) {
            s += w * f(mid + half * x);
        }
        s * half
    }
}

/// Value and derivative of the Legendre polynomial P_n at x.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for m in 2..=n {
        let m = m as f64;
        let p2 = ((2.0 * m - 1.0) * x * p1 - (m - 1.0) * p0) / m;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// k values whose θ_k curves are sampled for the soft-rounding figure.
pub const THETA_SAMPLE_KS: [u32; 4] = [1, 2, 5, 10];

/// Data backing the theory-curve CSV export: a k-grid with both moment
/// curves, plus θ_k(x) samples on an x-grid for k ∈ {1, 2, 5, 10}.
#[derive(Debug, Clone)]
pub struct TheoryCurves {
    pub points: Vec<CurvePoint>,
    pub x: Vec<f64>,
    /// θ_k(x) per k in [`THETA_SAMPLE_KS`], index-aligned with `x`.
    pub theta: Vec<Vec<f64>>,
}

/// Sample the moment curves on `n_points` values of k in
/// `[k_min, k_max]` and the θ_k curves on x ∈ [-2, 2].
pub fn compute_curves(k_min: f64, k_max: f64, n_points: usize) -> Result<TheoryCurves> {
    if !(k_min >= 1.0) || !(k_min < k_max) {
        return Err(Error::Domain(format!(
            "need 1 <= k_min < k_max, got [{k_min}, {k_max}]"
        )));
    }
    if n_points < 2 {
        return Err(Error::Config("need at least 2 curve points".into()));
    }
    let mut points = Vec::with_capacity(n_points);
    let mut x = Vec::with_capacity(n_points);
    let mut theta = vec![Vec::with_capacity(n_points); THETA_SAMPLE_KS.len()];
    for i in 0..n_points {
        let frac = i as f64 / (n_points - 1) as f64;
        let k = k_min + (k_max - k_min) * frac;
        points.push(CurvePoint {
            k,
            first_moment_sq: expected_grad_mean_sq(k)?,
            second_moment: expected_grad_sq_norm(k)?,
        });
        let xv = -2.0 + 4.0 * frac;
        x.push(xv);
        for (slot, &ks) in theta.iter_mut().zip(THETA_SAMPLE_KS.iter()) {
            slot.push(soft_theta(xv, ks as f64)?);
        }
    }
    Ok(TheoryCurves { points, x, theta })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_is_exact_on_polynomials() {
        // 8-point rule integrates degree <= 15 exactly
        let rule = GaussLegendre::new(8).unwrap();
        let got = rule.integrate(0.0, 1.0, |x| {
            let x2 = x * x;
            let x4 = x2 * x2;
            7.0 * x4 * x2 - 3.0 * x2 + 1.0
        });
        let expect = 1.0 - 1.0 + 1.0; // 7/7 - 3/3 + 1
        assert!((got - expect).abs() < 1e-14, "got {got}");
    }

    #[test]
    fn first_moment_before_squaring_is_one_over_k() {
        // antiderivative of sech² is tanh, so the unsquared integral is 1/k
        for &k in &[1.0, 2.5, 7.0] {
            let sq = quadrature_oracle(k, Moment::First).unwrap();
            assert!((fmath::sqrt(sq) - 1.0 / k).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_k_below_one() {
        assert!(matches!(expected_grad_mean_sq(0.5), Err(Error::Domain(_))));
        assert!(matches!(expected_grad_sq_norm(0.99), Err(Error::Domain(_))));
        assert!(matches!(compute_curves(0.5, 2.0, 10), Err(Error::Domain(_))));
    }
}

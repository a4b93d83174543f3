//! Principal branch of the product log (Lambert W) restricted to positive
//! arguments, plus the calculus identities the Hamiltonians rely on.

use crate::error::{Error, Result};
use std::f64::consts::E;

const MAX_ITER: usize = 50;
const TOL: f64 = 1e-14;
/// Above this log-argument `exp` is never formed.
const LOG_OVERFLOW: f64 = 700.0;

/// Result of a product-log evaluation with convergence diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlResult {
    pub value: f64,
    pub iterations: usize,
    /// `|w e^w - z|`
    pub residual: f64,
}

/// Solves `w e^w = z` for `w >= 0`, `z > 0`, reporting iterations and residual.
pub fn pl_detailed(z: f64) -> Result<PlResult> {
    if !(z > 0.0) || !z.is_finite() {
        return Err(Error::Domain(format!("product log needs z > 0, got {z}")));
    }
    let mut w = if z <= E {
        z.ln_1p()
    } else {
        let l1 = z.ln();
        l1 - l1.ln()
    };
    let mut iterations = 0;
    for _ in 0..MAX_ITER {
        iterations += 1;
        let ew = w.exp();
        let f = w * ew - z;
        let wp1 = w + 1.0;
        // Halley step
        let denom = ew * wp1 - (w + 2.0) * f / (2.0 * wp1);
        let step = f / denom;
        w -= step;
        if step.abs() <= TOL * (1.0 + w.abs()) {
            break;
        }
    }
    let w = w.max(0.0);
    Ok(PlResult {
        value: w,
        iterations,
        residual: (w * w.exp() - z).abs(),
    })
}

/// `PL(z)`: the inverse of `y -> y e^y` on `y > 0`.
pub fn pl(z: f64) -> Result<f64> {
    pl_detailed(z).map(|r| r.value)
}

/// `PL(exp(log_z))` without overflow for large `log_z`.
///
/// A log-argument of `-inf` (zero intensity) maps to `0`.
pub fn pl_of_log(log_z: f64) -> f64 {
    if log_z == f64::NEG_INFINITY {
        return 0.0;
    }
    if log_z.is_nan() {
        return f64::NAN;
    }
    if log_z > LOG_OVERFLOW {
        // w + ln w = s, Newton from the asymptotic branch
        let mut w = log_z - log_z.ln();
        for _ in 0..MAX_ITER {
            let f = w + w.ln() - log_z;
            let step = f / (1.0 + 1.0 / w);
            w -= step;
            if step.abs() <= TOL * w {
                break;
            }
        }
        return w;
    }
    if log_z < -700.0 {
        // w e^w = z with w ~ z: one fixed-point pass is exact to rounding.
        let w = log_z.exp();
        return (log_z - w).exp();
    }
    pl(log_z.exp()).unwrap_or(0.0)
}

/// `d/dz PL(z) = PL(z) / (z (1 + PL(z)))`.
pub fn pl_derivative(z: f64) -> Result<f64> {
    let w = pl(z)?;
    Ok(w / (z * (1.0 + w)))
}

/// `2K + z^2 - PL(K e^z)^2 - 2 PL(K e^z)`, nonnegative with equality iff `K = z`.
pub fn pl_quad_bound_gap(k: f64, z: f64) -> Result<f64> {
    if !(k > 0.0) {
        return Err(Error::Domain(format!("quadratic bound needs K > 0, got {k}")));
    }
    let w = pl_of_log(k.ln() + z);
    Ok(2.0 * k + z * z - w * w - 2.0 * w)
}

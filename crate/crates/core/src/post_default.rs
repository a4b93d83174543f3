//! Post-default certainty equivalent when one equity survives default.
//!
//! After default the investor trades the surviving equity alone, with no
//! further default risk. The value is affine in the factor,
//! `psi(s, y) = psi_g(s) + psi_h(s) y`, where
//!
//! ```text
//! psi_h' = -m^2/(2 alpha s2) + (kappa + xi c m / s2) psi_h
//!          + (alpha/2) xi^2 (1 - c^2/s2) psi_h^2,    psi_h(T) = 0
//! psi_g' = -kappa theta psi_h,                         psi_g(T) = 0
//! ```
//!
//! with `mu = m y`, `sigma_e^2 = s2 y` and equity/factor covariance `c xi y`.

use crate::error::{Error, Result};
use crate::model::{CirMarket, ScalarField};
use std::sync::Arc;

const STEPS_PER_UNIT: usize = 10_000;
const BLOW_UP: f64 = 1e8;

/// Scalar inputs of the post-default Riccati system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsiParams {
    pub kappa: f64,
    pub theta: f64,
    pub xi: f64,
    pub alpha: f64,
    /// drift per unit factor `(sigma nu)_i`
    pub m: f64,
    /// variance per unit factor `Sigma_ii`
    pub s2: f64,
    /// factor covariance per unit `(sigma rho)_i`
    pub c: f64,
}

impl PsiParams {
    /// Parameters for the market reduced to equity `i`.
    pub fn from_market(market: &CirMarket, i: usize, alpha: f64) -> Self {
        let f = market.factor;
        let m = (&market.sigma * &market.nu)[i];
        let s2 = market.sigma.row(i).norm_squared();
        let c = (&market.sigma * &market.rho)[i];
        Self {
            kappa: f.kappa,
            theta: f.theta,
            xi: f.xi,
            alpha,
            m,
            s2,
            c,
        }
    }

    /// `psi_h'` as a function of `psi_h`.
    pub fn rhs(&self, h: f64) -> f64 {
        let Self { kappa, xi, alpha, m, s2, c, .. } = *self;
        -m * m / (2.0 * alpha * s2)
            + (kappa + xi * c * m / s2) * h
            + 0.5 * alpha * xi * xi * (1.0 - c * c / s2) * h * h
    }
}

/// Tabulated `psi_g`, `psi_h` on a uniform grid of `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiAffine {
    pub params: PsiParams,
    pub horizon: f64,
    pub step: f64,
    pub psi_g: Vec<f64>,
    pub psi_h: Vec<f64>,
}

/// Integrates the Riccati system backward from `T`.
pub fn build_psi(params: PsiParams, horizon: f64) -> Result<PsiAffine> {
    if !(horizon > 0.0) || !(params.s2 > 0.0) || !(params.alpha > 0.0) {
        return Err(Error::Model(format!(
            "post-default value needs T > 0, s2 > 0, alpha > 0 (got {horizon}, {}, {})",
            params.s2, params.alpha
        )));
    }
    let n = ((horizon * STEPS_PER_UNIT as f64).ceil() as usize).max(1);
    let dt = horizon / n as f64;
    let mut h = vec![0.0; n + 1];
    let mut g = vec![0.0; n + 1];
    let kt = params.kappa * params.theta;
    // backward in calendar time: u = T - s, dh/du = -rhs(h), dg/du = kappa theta h
    for i in (0..n).rev() {
        let h0 = h[i + 1];
        let f = |v: f64| -params.rhs(v);
        let k1 = f(h0);
        let k2 = f(h0 + 0.5 * dt * k1);
        let k3 = f(h0 + 0.5 * dt * k2);
        let k4 = f(h0 + dt * k3);
        let h1 = h0 + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if !h1.is_finite() || h1.abs() > BLOW_UP {
            return Err(Error::Horizon {
                blow_up_time: i as f64 * dt,
            });
        }
        // Simpson on the RK stages for the integral of h
        let hm = h0 + 0.5 * dt * (0.5 * (k2 + k3));
        g[i] = g[i + 1] + kt * dt / 6.0 * (h0 + 4.0 * hm + h1);
        h[i] = h1;
    }
    Ok(PsiAffine {
        params,
        horizon,
        step: dt,
        psi_g: g,
        psi_h: h,
    })
}

impl PsiAffine {
    fn locate(&self, s: f64) -> (usize, f64) {
        let n = self.psi_h.len() - 1;
        let u = (s / self.step).clamp(0.0, n as f64);
        let i = (u.floor() as usize).min(n - 1);
        (i, u - i as f64)
    }

    /// `(psi_g(s), psi_h(s))` by linear interpolation.
    pub fn coefficients(&self, s: f64) -> (f64, f64) {
        let (i, w) = self.locate(s);
        let lerp = |v: &[f64]| v[i] + w * (v[i + 1] - v[i]);
        (lerp(&self.psi_g), lerp(&self.psi_h))
    }

    pub fn eval(&self, s: f64, y: f64) -> f64 {
        let (g, h) = self.coefficients(s);
        g + h * y
    }

    /// The post-default value as a field over `(t, x)`.
    pub fn to_field(self: &Arc<Self>) -> ScalarField {
        let me = Arc::clone(self);
        ScalarField::from_fn(move |t, x| me.eval(t, x[0]))
    }

    /// Largest residual of the affine ansatz in the post-default PDE,
    /// using centred differences of the table at interior nodes.
    pub fn ansatz_residual(&self) -> f64 {
        let p = self.params;
        let n = self.psi_h.len() - 1;
        let mut worst: f64 = 0.0;
        for i in 1..n {
            let dh = (self.psi_h[i + 1] - self.psi_h[i - 1]) / (2.0 * self.step);
            let dg = (self.psi_g[i + 1] - self.psi_g[i - 1]) / (2.0 * self.step);
            let rh = dh - p.rhs(self.psi_h[i]);
            let rg = dg + p.kappa * p.theta * self.psi_h[i];
            worst = worst.max(rh.abs()).max(rg.abs());
        }
        worst
    }
}

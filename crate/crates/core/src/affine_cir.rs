//! Affine survival transform of the CIR factor under the spot pricing
//! measure: `D~(u, y) = A~(u) exp(-B~(u) y)`.

use crate::error::{Error, Result};
use crate::model::{AffineIntensity, CirMarket, ModelSpec};

/// RK4 step for the Riccati system.
pub const RICCATI_STEP: f64 = 1e-3;

/// CIR parameters with the intensity that is being discounted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CirParams {
    pub kappa: f64,
    pub theta: f64,
    pub xi: f64,
    pub intensity: AffineIntensity,
}

impl CirParams {
    pub fn feller(&self) -> bool {
        2.0 * self.kappa * self.theta >= self.xi * self.xi
    }

    /// `E[X_u | X_t = x]`
    pub fn mean(&self, t: f64, x: f64, u: f64) -> f64 {
        let e = (-self.kappa * (u - t)).exp();
        x * e + self.theta * (1.0 - e)
    }
}

/// Spot-measure parameters `(kappa~, theta~)` of the CIR factor.
pub fn ptilde_params_cir(market: &CirMarket) -> Result<CirParams> {
    let (kt, level) = market.ptilde_drift();
    if !(kt > 0.0) {
        return Err(Error::MeasureChange { kappa_tilde: kt });
    }
    Ok(CirParams {
        kappa: kt,
        theta: level / kt,
        xi: market.factor.xi,
        intensity: market.gamma_tilde,
    })
}

pub fn ptilde_params(spec: &ModelSpec) -> Result<CirParams> {
    let m = spec
        .cir()
        .ok_or_else(|| Error::Model("spot-measure parameters need the affine CIR family".into()))?;
    ptilde_params_cir(m)
}

/// `E~[X_u | X_t = x]` under the given parameters.
pub fn cir_mean(params: &CirParams, t: f64, x: f64, u: f64) -> f64 {
    params.mean(t, x, u)
}

/// Tabulated `(A~, B~)` on a uniform grid of `u`, interpolated by monotone cubics.
#[derive(Debug, Clone)]
pub struct AffineTransform {
    params: CirParams,
    step: f64,
    log_a: Vec<f64>,
    b: Vec<f64>,
    log_a_slope: Vec<f64>,
    b_slope: Vec<f64>,
}

fn riccati_rhs(p: &CirParams, b: f64) -> (f64, f64) {
    let db = p.intensity.slope - p.kappa * b - 0.5 * p.xi * p.xi * b * b;
    let dla = -p.kappa * p.theta * b - p.intensity.level;
    (db, dla)
}

impl AffineTransform {
    /// Integrates the Riccati system on `[0, horizon]` with the default step.
    pub fn new(params: CirParams, horizon: f64) -> Result<Self> {
        Self::with_step(params, horizon, RICCATI_STEP)
    }

    pub fn with_step(params: CirParams, horizon: f64, step: f64) -> Result<Self> {
        if !(horizon >= 0.0) || !(step > 0.0) {
            return Err(Error::Domain(format!("bad transform horizon {horizon} / step {step}")));
        }
        let n = ((horizon / step).round() as usize).max(1);
        let h = horizon / n as f64;
        let mut b = Vec::with_capacity(n + 1);
        let mut log_a = Vec::with_capacity(n + 1);
        let (mut bv, mut la) = (0.0_f64, 0.0_f64);
        b.push(bv);
        log_a.push(la);
        for i in 0..n {
            let (k1b, k1a) = riccati_rhs(&params, bv);
            let (k2b, k2a) = riccati_rhs(&params, bv + 0.5 * h * k1b);
            let (k3b, k3a) = riccati_rhs(&params, bv + 0.5 * h * k2b);
            let (k4b, k4a) = riccati_rhs(&params, bv + h * k3b);
            bv += h / 6.0 * (k1b + 2.0 * k2b + 2.0 * k3b + k4b);
            la += h / 6.0 * (k1a + 2.0 * k2a + 2.0 * k3a + k4a);
            if !bv.is_finite() || !la.is_finite() {
                return Err(Error::Numerical(format!(
                    "Riccati step {i} at u={} produced a non-finite value",
                    (i + 1) as f64 * h
                )));
            }
            b.push(bv);
            log_a.push(la);
        }
        let (b_slope, log_a_slope): (Vec<f64>, Vec<f64>) =
            b.iter().map(|&bv| riccati_rhs(&params, bv)).unzip();
        let b_slope = monotone_limit(&b, b_slope, h);
        let log_a_slope = monotone_limit(&log_a, log_a_slope, h);
        Ok(Self {
            params,
            step: h,
            log_a,
            b,
            log_a_slope,
            b_slope,
        })
    }

    pub fn params(&self) -> &CirParams {
        &self.params
    }

    pub fn horizon(&self) -> f64 {
        self.step * (self.b.len() - 1) as f64
    }

    pub fn nodes(&self) -> usize {
        self.b.len()
    }

    fn locate(&self, u: f64) -> Result<(usize, f64)> {
        let hz = self.horizon();
        if !(u >= 0.0) || u > hz * (1.0 + 1e-12) + 1e-15 {
            return Err(Error::Domain(format!("transform evaluated at u={u} outside [0, {hz}]")));
        }
        let pos = (u / self.step).min((self.b.len() - 1) as f64);
        let i = (pos.floor() as usize).min(self.b.len() - 2);
        Ok((i, pos - i as f64))
    }

    /// `(A~(u), B~(u))`
    pub fn eval(&self, u: f64) -> Result<(f64, f64)> {
        let (i, s) = self.locate(u)?;
        let la = hermite(&self.log_a, &self.log_a_slope, self.step, i, s);
        let b = hermite(&self.b, &self.b_slope, self.step, i, s);
        Ok((la.exp(), b))
    }

    /// `D~(u, y)`
    pub fn survival(&self, u: f64, y: f64) -> Result<f64> {
        let (a, b) = self.eval(u)?;
        Ok(a * (-b * y).exp())
    }

    /// Sup-norm residual of the tabulated values in the Riccati ODEs, using
    /// fourth-order central differences on interior nodes.
    pub fn riccati_residual(&self) -> f64 {
        let h = self.step;
        let n = self.b.len();
        let mut worst = 0.0_f64;
        for i in 2..n.saturating_sub(2) {
            let d = |v: &[f64]| (-v[i + 2] + 8.0 * v[i + 1] - 8.0 * v[i - 1] + v[i - 2]) / (12.0 * h);
            let (db, dla) = riccati_rhs(&self.params, self.b[i]);
            worst = worst.max((d(&self.b) - db).abs()).max((d(&self.log_a) - dla).abs());
        }
        worst
    }

    /// Tabulated `B~` values at the nodes.
    pub fn b_nodes(&self) -> &[f64] {
        &self.b
    }

    /// Closed-form solution of the same Riccati system.
    pub fn closed_form(params: &CirParams, u: f64) -> (f64, f64) {
        let (k, xi2, g1) = (params.kappa, params.xi * params.xi, params.intensity.slope);
        let h = (k * k + 2.0 * xi2 * g1).sqrt();
        let em1 = (h * u).exp_m1();
        let denom = 2.0 * h + (k + h) * em1;
        let b = 2.0 * g1 * em1 / denom;
        let log_a = if xi2 > 0.0 {
            2.0 * k * params.theta / xi2 * ((2.0 * h).ln() + 0.5 * (k + h) * u - denom.ln())
        } else {
            // xi = 0: B = g1 (1 - e^{-ku}) / k, log A = -k theta int B
            let bint = if k > 0.0 { g1 * (u - (-(k * u)).exp_m1() / -k) / k } else { 0.5 * g1 * u * u };
            -k * params.theta * bint
        };
        ((log_a - params.intensity.level * u).exp(), b)
    }
}

/// Fritsch-Carlson limiter applied to given node slopes so the Hermite
/// interpolant is monotone wherever the data are.
fn monotone_limit(y: &[f64], mut m: Vec<f64>, h: f64) -> Vec<f64> {
    for i in 0..y.len().saturating_sub(1) {
        let d = (y[i + 1] - y[i]) / h;
        if d == 0.0 {
            m[i] = 0.0;
            m[i + 1] = 0.0;
            continue;
        }
        if m[i] * d < 0.0 {
            m[i] = 0.0;
        }
        if m[i + 1] * d < 0.0 {
            m[i + 1] = 0.0;
        }
        let (a, b) = (m[i] / d, m[i + 1] / d);
        let r = a * a + b * b;
        if r > 9.0 {
            let t = 3.0 / r.sqrt();
            m[i] = t * a * d;
            m[i + 1] = t * b * d;
        }
    }
    m
}

/// Fritsch-Carlson monotone cubic slopes on a uniform grid.
#[cfg(test)]
fn pchip_slopes(y: &[f64], h: f64) -> Vec<f64> {
    let n = y.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let delta: Vec<f64> = y.windows(2).map(|w| (w[1] - w[0]) / h).collect();
    let mut m = vec![0.0; n];
    if n == 2 {
        return vec![delta[0]; 2];
    }
    for i in 1..n - 1 {
        let (d0, d1) = (delta[i - 1], delta[i]);
        m[i] = if d0 * d1 <= 0.0 { 0.0 } else { 2.0 * d0 * d1 / (d0 + d1) };
    }
    let end = |d0: f64, d1: f64| {
        let s = (3.0 * d0 - d1) / 2.0;
        if s * d0 <= 0.0 {
            0.0
        } else if d0 * d1 <= 0.0 && s.abs() > 3.0 * d0.abs() {
            3.0 * d0
        } else {
            s
        }
    };
    m[0] = end(delta[0], delta[1]);
    m[n - 1] = end(delta[n - 2], delta[n - 3]);
    m
}

fn hermite(y: &[f64], m: &[f64], h: f64, i: usize, s: f64) -> f64 {
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    h00 * y[i] + h10 * h * m[i] + h01 * y[i + 1] + h11 * h * m[i + 1]
}

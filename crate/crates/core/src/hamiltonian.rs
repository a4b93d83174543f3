//! Pointwise Hamiltonian algebra: the `K1..K6` coefficients, the
//! conditional equity policy, the reduced Hamiltonians for the complete and
//! incomplete markets, their residuals, and the equity-only benchmark.
//!
//! All product-log arguments are carried as logarithms.

use crate::error::{Error, Result};
use crate::model::{Covariances, PointCoefficients};
use crate::product_log::pl_of_log;
use nalgebra::{DMatrix, DVector};

/// `K1` below this multiple of `sigma' A sigma` is treated as zero.
pub const K1_ZERO_RATIO: f64 = 1e-12;

/// The scalar coefficients of the conditional `delta` problem at `(g, p)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KCoefficients {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    /// `log K4`; `K4` itself is never formed.
    pub log_k4: f64,
    pub k5: f64,
    /// `(K1 K3 + K5^2) / K1`, present when `K1 > 0`
    pub k6: Option<f64>,
}

/// Optimal policy and Hamiltonian value at one `(t, x, g, p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Reduced {
    /// the reduced Hamiltonian `sup_pi H(pi, g, p)`
    pub value: f64,
    pub theta: DVector<f64>,
    /// CDS position (zero for the equity-only benchmark)
    pub delta: f64,
    pub r_h: f64,
    pub r_delta: f64,
    /// `PL(K4 e^{-alpha K5 delta}) / K3`, the default intensity of the
    /// optimal dual measure
    pub dual_intensity: f64,
    /// residual of the first-order condition in `delta`
    pub foc_residual: f64,
}

/// Coefficients at one `(t, x)` with every `(g, p)`-independent product
/// precomputed.
#[derive(Debug, Clone)]
pub struct HamiltonianInputs {
    pub alpha: f64,
    pub gamma: f64,
    pub gamma_tilde: f64,
    pub psi: f64,
    pub sigma_r: DVector<f64>,
    pub mu_e: DVector<f64>,
    pub loss: DVector<f64>,
    pub sigma_e_inv_full: DMatrix<f64>,
    pub upsilon_e: DMatrix<f64>,
    pub big_a: DMatrix<f64>,
    pub q_c: f64,
    k3: f64,
    /// `l' Sigma_e^{-1} mu_e`
    lsm: f64,
    /// `Upsilon_e' Sigma_e^{-1} l`
    k5bar: DVector<f64>,
    /// `Upsilon_e' Sigma_e^{-1} mu_e`
    usm: DVector<f64>,
    /// `mu_e' Sigma_e^{-1} mu_e`
    msm: f64,
    /// `Upsilon_e' Sigma_e^{-1} Upsilon_e`
    usu: DMatrix<f64>,
    /// `Kbar1 sigma_r`
    k1bar_sigma: DVector<f64>,
    /// `sigma_r' (a nu~ - Upsilon_e' Sigma_e^{-1} mu_e)`
    c2: f64,
    /// `a sigma_e^{-1}(mu_e - gt l)`
    drift_c: DVector<f64>,
    k1: f64,
    k5: f64,
    sigma_a_sigma: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn quad(m: &DMatrix<f64>, p: &[f64]) -> f64 {
    let n = p.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += p[i] * m[(i, j)] * p[j];
        }
    }
    s
}

impl HamiltonianInputs {
    pub fn new(
        point: &PointCoefficients,
        sigma_r: &DVector<f64>,
        psi: f64,
        alpha: f64,
        t: f64,
        x: &[f64],
    ) -> Result<Self> {
        if !(point.gamma >= 0.0) || !(point.gamma_tilde >= 0.0) {
            return Err(Error::Coefficient {
                t,
                x: x.to_vec(),
                reason: format!(
                    "intensities must be nonnegative (got {}, {})",
                    point.gamma, point.gamma_tilde
                ),
            });
        }
        let sig_inv = point.sigma_e_inverse(t, x)?;
        let sigma_e_inv_full = sig_inv.transpose() * &sig_inv;
        let upsilon_e = &point.sigma_e * &point.rho * point.a.transpose();
        let big_a = point.big_a();
        let sil = &sigma_e_inv_full * &point.loss;
        let sim = &sigma_e_inv_full * &point.mu_e;
        let k3 = point.loss.dot(&sil);
        let k5bar = upsilon_e.transpose() * &sil;
        let usm = upsilon_e.transpose() * &sim;
        let usu = upsilon_e.transpose() * &sigma_e_inv_full * &upsilon_e;
        let k1bar = &big_a - &usu;
        let k1bar_sigma = &k1bar * sigma_r;
        let a_nu = &point.a * &point.nu_tilde;
        let c2 = sigma_r.dot(&(a_nu - &usm));
        let mpr = &sig_inv * (&point.mu_e - point.gamma_tilde * &point.loss);
        // only meaningful when equities and factors match in number
        let drift_c = if mpr.len() == point.a.ncols() {
            &point.a * &mpr
        } else {
            DVector::from_element(point.a.nrows(), f64::NAN)
        };
        let q_c = 0.5 * mpr.norm_squared() + crate::model::jump_entropy(point.gamma, point.gamma_tilde);
        let k1 = sigma_r.dot(&k1bar_sigma).max(0.0);
        let k5 = 1.0 + sigma_r.dot(&k5bar);
        let sigma_a_sigma = sigma_r.dot(&(&big_a * sigma_r));
        Ok(Self {
            alpha,
            gamma: point.gamma,
            gamma_tilde: point.gamma_tilde,
            psi,
            sigma_r: sigma_r.clone(),
            mu_e: point.mu_e.clone(),
            loss: point.loss.clone(),
            sigma_e_inv_full,
            upsilon_e,
            big_a,
            q_c,
            k3,
            lsm: point.loss.dot(&sim),
            k5bar,
            usm,
            msm: point.mu_e.dot(&sim),
            usu,
            k1bar_sigma,
            c2,
            drift_c,
            k1,
            k5,
            sigma_a_sigma,
        })
    }

    pub fn k3(&self) -> f64 {
        self.k3
    }

    /// `1 + sigma_r' Kbar5`; equals `v_c` in the complete market.
    pub fn k5(&self) -> f64 {
        self.k5
    }

    pub fn k1(&self) -> f64 {
        self.k1
    }

    fn k1_is_zero(&self) -> bool {
        self.k1 <= K1_ZERO_RATIO * self.sigma_a_sigma
    }

    pub fn sigma_is_zero(&self) -> bool {
        self.sigma_r.iter().all(|v| *v == 0.0)
    }

    pub fn log_k4(&self, g: f64, p: &[f64]) -> f64 {
        (self.k3 * self.gamma).ln() + self.alpha * (g - self.psi) + self.lsm
            - self.alpha * dot(self.k5bar.as_slice(), p)
    }

    pub fn k2(&self, p: &[f64]) -> f64 {
        -self.gamma_tilde + self.c2 - self.alpha * dot(self.k1bar_sigma.as_slice(), p)
    }

    pub fn k_coefficients(&self, g: f64, p: &[f64]) -> KCoefficients {
        let k6 = (!self.k1_is_zero()).then(|| (self.k1 * self.k3 + self.k5 * self.k5) / self.k1);
        KCoefficients {
            k1: self.k1,
            k2: self.k2(p),
            k3: self.k3,
            log_k4: self.log_k4(g, p),
            k5: self.k5,
            k6,
        }
    }

    /// `(1/2 alpha)(mu_e - alpha Upsilon_e p)' Sigma_e^{-1} (mu_e - alpha Upsilon_e p)`
    fn quad_base(&self, p: &[f64]) -> f64 {
        self.msm / (2.0 * self.alpha) - dot(p, self.usm.as_slice())
            + 0.5 * self.alpha * quad(&self.usu, p)
    }

    /// The `delta` objective after optimising out `theta`.
    pub fn delta_objective(&self, k: &KCoefficients, delta: f64) -> f64 {
        let w = pl_of_log(k.log_k4 - self.alpha * k.k5 * delta);
        -0.5 * self.alpha * k.k1 * delta * delta + k.k2 * delta
            - (w * w + 2.0 * w) / (2.0 * self.alpha * k.k3)
    }

    fn foc(&self, k: &KCoefficients, delta: f64) -> f64 {
        let w = pl_of_log(k.log_k4 - self.alpha * k.k5 * delta);
        -self.alpha * k.k1 * delta + k.k2 + k.k5 / k.k3 * w
    }

    /// `(gt^2 K3)/(2 alpha) - gt/alpha - (gt/alpha) log(K4 / (gt K3))`
    fn sigma_zero_value(&self, k: &KCoefficients) -> f64 {
        let gt = self.gamma_tilde;
        gt * gt * k.k3 / (2.0 * self.alpha) - gt / self.alpha
            - gt / self.alpha * (k.log_k4 - (gt * k.k3).ln())
    }

    fn sigma_zero_delta(&self, k: &KCoefficients) -> f64 {
        let gt = self.gamma_tilde;
        (-gt * k.k3 + k.log_k4 - (gt * k.k3).ln()) / self.alpha
    }

    /// Equity policy for a fixed CDS position.
    pub fn theta_given_delta(&self, g: f64, p: &[f64], delta: f64) -> DVector<f64> {
        let log_k4 = self.log_k4(g, p);
        let w = pl_of_log(log_k4 - self.alpha * self.k5 * delta);
        self.theta_with_pl(p, delta, w)
    }

    fn theta_with_pl(&self, p: &[f64], delta: f64, w: f64) -> DVector<f64> {
        let pv = DVector::from_column_slice(p);
        let rhs = &self.mu_e - self.alpha * (&self.upsilon_e * (&pv + delta * &self.sigma_r))
            - (w / self.k3) * &self.loss;
        (&self.sigma_e_inv_full * rhs) / self.alpha
    }

    /// Complete-market Hamiltonian value without building policies.
    pub fn complete_value(&self, g: f64, p: &[f64]) -> f64 {
        (self.q_c - self.gamma) / self.alpha + self.gamma_tilde * (self.psi - g)
            + 0.5 * self.alpha * quad(&self.big_a, p)
            - dot(p, self.drift_c.as_slice())
    }

    pub fn reduced_complete(&self, g: f64, p: &[f64], t: f64, x: &[f64]) -> Result<Reduced> {
        if self.k5 == 0.0 || !self.k5.is_finite() {
            return Err(Error::Completeness {
                t,
                x: x.to_vec(),
                v_c: self.k5,
            });
        }
        let k = self.k_coefficients(g, p);
        let gt = self.gamma_tilde;
        let delta = (-gt * k.k3 + k.log_k4 - (gt * k.k3).ln()) / (self.alpha * k.k5);
        let w = gt * k.k3;
        let theta = self.theta_with_pl(p, delta, w);
        let pl_at = pl_of_log(k.log_k4 - self.alpha * k.k5 * delta);
        Ok(Reduced {
            value: self.complete_value(g, p),
            theta,
            delta,
            r_h: 0.0,
            r_delta: 0.0,
            dual_intensity: gt,
            foc_residual: pl_at - gt * k.k3,
        })
    }

    /// Optimal `delta` and the product log at it, for the incomplete market.
    fn incomplete_delta(&self, k: &KCoefficients) -> Result<(f64, f64)> {
        if self.sigma_is_zero() {
            let d = self.sigma_zero_delta(k);
            return Ok((d, self.gamma_tilde * k.k3));
        }
        let alpha = self.alpha;
        match k.k6 {
            None => {
                // K1 = 0: 0 = K2 + (K5/K3) PL  =>  PL = -K2 K3 / K5
                let w = -k.k2 * k.k3 / k.k5;
                if !(w > 0.0) || !w.is_finite() {
                    return Err(Error::DegenerateSchur {
                        k1: k.k1,
                        sigma_norm: self.sigma_r.norm(),
                    });
                }
                Ok(((k.log_k4 - w.ln() - w) / (alpha * k.k5), w))
            }
            Some(k6) => {
                let log_arg = k.log_k4 + k6.ln() - k.k3.ln() - k.k5 * k.k2 / k.k1;
                let z = pl_of_log(log_arg);
                // PL at the optimum: w = K3 z / K6
                let w = k.k3 * z / k6;
                let d_lin = k.k2 / (alpha * k.k1) + k.k5 / (alpha * k.k1 * k6) * z;
                let mut best = (d_lin, self.foc(k, d_lin).abs());
                if k.k5 != 0.0 && w > 0.0 {
                    let d_log = (k.log_k4 - w.ln() - w) / (alpha * k.k5);
                    let r = self.foc(k, d_log).abs();
                    if r < best.1 {
                        best = (d_log, r);
                    }
                }
                let d = best.0;
                Ok((d, pl_of_log(k.log_k4 - alpha * k.k5 * d)))
            }
        }
    }

    /// Incomplete-market Hamiltonian value without building policies.
    pub fn incomplete_value(&self, g: f64, p: &[f64]) -> Result<f64> {
        let k = self.k_coefficients(g, p);
        let (delta, w) = self.incomplete_delta(&k)?;
        let f = -0.5 * self.alpha * k.k1 * delta * delta + k.k2 * delta
            - (w * w + 2.0 * w) / (2.0 * self.alpha * k.k3);
        Ok(self.quad_base(p) + f)
    }

    pub fn reduced_incomplete(&self, g: f64, p: &[f64]) -> Result<Reduced> {
        let k = self.k_coefficients(g, p);
        let (delta, w) = self.incomplete_delta(&k)?;
        let f = -0.5 * self.alpha * k.k1 * delta * delta + k.k2 * delta
            - (w * w + 2.0 * w) / (2.0 * self.alpha * k.k3);
        let zero = self.sigma_is_zero();
        let (r_h, r_delta) = if zero {
            (0.0, 0.0)
        } else {
            (f - self.sigma_zero_value(&k), delta - self.sigma_zero_delta(&k))
        };
        Ok(Reduced {
            value: self.quad_base(p) + f,
            theta: self.theta_with_pl(p, delta, w),
            delta,
            r_h,
            r_delta,
            dual_intensity: w / k.k3,
            foc_residual: if zero {
                w - self.gamma_tilde * k.k3
            } else {
                self.foc(&k, delta)
            },
        })
    }

    /// Closed-form residual `R_H` after substituting the interior optimum;
    /// defined only when `K1 > 0`.
    pub fn residual_closed_form(&self, g: f64, p: &[f64]) -> Option<f64> {
        let k = self.k_coefficients(g, p);
        let k6 = k.k6?;
        let log_arg = k.log_k4 + k6.ln() - k.k3.ln() - k.k5 * k.k2 / k.k1;
        let z = pl_of_log(log_arg);
        Some(-self.sigma_zero_value(&k) + k.k2 * k.k2 / (2.0 * self.alpha * k.k1)
            - (z * z + 2.0 * z) / (2.0 * self.alpha * k6))
    }

    /// The printed incomplete Hamiltonian without its residual term.
    pub fn incomplete_value_without_residual(&self, g: f64, p: &[f64]) -> f64 {
        let tilde = &self.usm - self.gamma_tilde * (&self.upsilon_e.transpose() * &self.sigma_e_inv_full * &self.loss);
        (self.q_c - self.gamma) / self.alpha + self.gamma_tilde * (self.psi - g)
            + 0.5 * self.alpha * quad(&self.usu, p)
            - dot(p, tilde.as_slice())
    }

    /// Equity-only benchmark value.
    pub fn nocds_value(&self, g: f64, p: &[f64]) -> f64 {
        let w = pl_of_log(self.log_k4(g, p));
        self.quad_base(p) - (w * w + 2.0 * w) / (2.0 * self.alpha * self.k3)
    }

    pub fn reduced_nocds(&self, g: f64, p: &[f64]) -> Reduced {
        let w = pl_of_log(self.log_k4(g, p));
        let pv = DVector::from_column_slice(p);
        let rhs = &self.mu_e - self.alpha * (&self.upsilon_e * pv) - (w / self.k3) * &self.loss;
        Reduced {
            value: self.nocds_value(g, p),
            theta: (&self.sigma_e_inv_full * rhs) / self.alpha,
            delta: 0.0,
            r_h: 0.0,
            r_delta: 0.0,
            dual_intensity: w / self.k3,
            foc_residual: 0.0,
        }
    }
}

/// Optimal policy and value of the general Hamiltonian with invertible `Sigma`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralPolicy {
    pub pi: DVector<f64>,
    pub value: f64,
    /// `PL(g, p)`
    pub pl: f64,
    /// `l' Sigma^{-1} l`
    pub l_sigma_l: f64,
}

/// Market blocks entering the general Hamiltonian `H(pi, g, p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketBlocks {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub upsilon: DMatrix<f64>,
    pub loss: DVector<f64>,
    pub gamma: f64,
    pub psi: f64,
    pub alpha: f64,
}

impl MarketBlocks {
    /// Equity + rolling CDS blocks at one point.
    pub fn with_cds(point: &PointCoefficients, cov: &Covariances, sigma_r: &DVector<f64>, psi: f64, alpha: f64) -> Self {
        let k = point.mu_e.len();
        let mut mu = DVector::zeros(k + 1);
        mu.rows_mut(0, k).copy_from(&point.mu_e);
        mu[k] = (sigma_r.transpose() * &point.a * &point.nu_tilde)[(0, 0)] - point.gamma_tilde;
        let mut loss = DVector::zeros(k + 1);
        loss.rows_mut(0, k).copy_from(&point.loss);
        loss[k] = -1.0;
        Self {
            mu,
            sigma: cov.sigma.clone(),
            upsilon: cov.upsilon.clone(),
            loss,
            gamma: point.gamma,
            psi,
            alpha,
        }
    }

    /// Equity-only blocks.
    pub fn equity_only(point: &PointCoefficients, cov: &Covariances, psi: f64, alpha: f64) -> Self {
        Self {
            mu: point.mu_e.clone(),
            sigma: cov.sigma_e.clone(),
            upsilon: cov.upsilon_e.clone(),
            loss: point.loss.clone(),
            gamma: point.gamma,
            psi,
            alpha,
        }
    }

    /// `H(pi, g, p) = pi'(mu - alpha Upsilon p) - alpha/2 pi' Sigma pi - gamma/alpha e^{alpha(g + pi'l - psi)}`
    pub fn hamiltonian(&self, pi: &DVector<f64>, g: f64, p: &DVector<f64>) -> f64 {
        let a = self.alpha;
        pi.dot(&(&self.mu - a * (&self.upsilon * p))) - 0.5 * a * pi.dot(&(&self.sigma * pi))
            - self.gamma / a * (a * (g + pi.dot(&self.loss) - self.psi)).exp()
    }

    /// Closed-form maximiser of `H` for invertible `Sigma`.
    pub fn general_policy(&self, g: f64, p: &DVector<f64>) -> Result<GeneralPolicy> {
        let inv = self
            .sigma
            .clone()
            .try_inverse()
            .filter(|m| m.iter().all(|v| v.is_finite()))
            .ok_or_else(|| Error::Numerical("Sigma is singular; use the K-coefficient route".into()))?;
        let a = self.alpha;
        let m = &self.mu - a * (&self.upsilon * p);
        let sil = &inv * &self.loss;
        let lsl = self.loss.dot(&sil);
        let log_arg = (self.gamma * lsl).ln() + a * (g - self.psi) + sil.dot(&m);
        let w = pl_of_log(log_arg);
        let pi = (&inv * &m - (w / lsl) * &sil) / a;
        let value = m.dot(&(&inv * &m)) / (2.0 * a) - (w * w + 2.0 * w) / (2.0 * a * lsl);
        Ok(GeneralPolicy {
            pi,
            value,
            pl: w,
            l_sigma_l: lsl,
        })
    }
}

/// Numerical maximiser of `H`, independent of the closed forms.
#[derive(Debug, Clone, PartialEq)]
pub struct BruteForce {
    pub theta: DVector<f64>,
    /// CDS position; zero without the CDS
    pub delta: f64,
    pub value: f64,
}

const BRUTE_BRACKET: f64 = 50.0;

impl MarketBlocks {
    fn assemble(&self, theta: &DVector<f64>, delta: Option<f64>) -> DVector<f64> {
        match delta {
            Some(d) => {
                let k = theta.len();
                let mut pi = DVector::zeros(k + 1);
                pi.rows_mut(0, k).copy_from(theta);
                pi[k] = d;
                pi
            }
            None => theta.clone(),
        }
    }

    /// Maximises `H` over the equity positions with the CDS position fixed,
    /// by damped Newton from zero.
    fn inner_max(&self, g: f64, p: &DVector<f64>, delta: Option<f64>) -> Result<(DVector<f64>, f64)> {
        let a = self.alpha;
        let k = self.mu.len() - delta.is_some() as usize;
        let m = &self.mu - a * (&self.upsilon * p);
        let mut theta = DVector::zeros(k);
        let mut value = self.hamiltonian(&self.assemble(&theta, delta), g, p);
        for _ in 0..200 {
            let pi = self.assemble(&theta, delta);
            let e = self.gamma * (a * (g + pi.dot(&self.loss) - self.psi)).exp();
            let le = self.loss.rows(0, k);
            let grad = m.rows(0, k) - a * (&self.sigma * &pi).rows(0, k) - e * le;
            let hess = -a * self.sigma.view((0, 0), (k, k)) - a * e * le * le.transpose();
            let step = (-hess)
                .lu()
                .solve(&grad)
                .ok_or_else(|| Error::Numerical("singular equity block in the brute-force search".into()))?;
            let mut lambda = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let trial = &theta + lambda * &step;
                let v = self.hamiltonian(&self.assemble(&trial, delta), g, p);
                if v.is_finite() && v >= value {
                    theta = trial;
                    value = v;
                    accepted = true;
                    break;
                }
                lambda *= 0.5;
            }
            if !accepted || (lambda * step.norm()) <= 1e-14 * (1.0 + theta.norm()) {
                break;
            }
        }
        Ok((theta, value))
    }

    /// Golden-section search over the CDS position in `[-50, 50]` around
    /// the inner maximiser. `with_cds = false` maximises over equities only.
    pub fn brute_force_policy(&self, g: f64, p: &DVector<f64>, with_cds: bool) -> Result<BruteForce> {
        if !with_cds {
            let (theta, value) = self.inner_max(g, p, None)?;
            return Ok(BruteForce { theta, delta: 0.0, value });
        }
        let profile = |d: f64| self.inner_max(g, p, Some(d)).map(|r| r.1);
        let ratio = 0.5 * (5f64.sqrt() - 1.0);
        let (mut lo, mut hi) = (-BRUTE_BRACKET, BRUTE_BRACKET);
        let mut x1 = hi - ratio * (hi - lo);
        let mut x2 = lo + ratio * (hi - lo);
        let (mut f1, mut f2) = (profile(x1)?, profile(x2)?);
        while hi - lo > 1e-10 {
            if f1 < f2 {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + ratio * (hi - lo);
                f2 = profile(x2)?;
            } else {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - ratio * (hi - lo);
                f1 = profile(x1)?;
            }
        }
        let delta = 0.5 * (lo + hi);
        if BRUTE_BRACKET - delta.abs() < 1e-6 {
            return Err(Error::Numerical(format!("brute-force CDS position hit the bracket edge at {delta}")));
        }
        let (theta, value) = self.inner_max(g, p, Some(delta))?;
        Ok(BruteForce { theta, delta, value })
    }
}

/// Violation of `delta = l'theta + g - psi + (1/alpha) log(gamma / intensity)`.
pub fn decomposition_gap(
    theta: &DVector<f64>,
    delta: f64,
    loss: &DVector<f64>,
    g: f64,
    psi: f64,
    gamma: f64,
    intensity: f64,
    alpha: f64,
) -> f64 {
    (delta - loss.dot(theta) - (g - psi) - (gamma / intensity).ln() / alpha).abs()
}

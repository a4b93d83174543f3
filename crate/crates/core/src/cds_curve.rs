//! Rolling CDS: protection value `u~`, annuity `v~`, fair spread and the
//! spread volatility loading `sigma_r`, for the affine CIR family.

use crate::affine_cir::{AffineTransform, CirParams};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, PointCoefficients};
use nalgebra::DVector;
use std::path::Path;

/// Composite Simpson sub-intervals for the annuity integrals.
pub const SIMPSON_INTERVALS: usize = 512;

/// Curve quantities at one `(s, y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub u_tilde: f64,
    pub v_tilde: f64,
    /// `d u~ / dy`
    pub du: f64,
    /// `d v~ / dy`
    pub dv: f64,
}

impl CurvePoint {
    pub fn spread(&self) -> f64 {
        self.u_tilde / self.v_tilde
    }

    /// `u~ d/dy log(u~ / v~)`
    pub fn sigma_r(&self, s: f64, y: f64) -> Result<f64> {
        if !(self.v_tilde > 0.0) {
            return Err(Error::SingularCurve {
                s,
                y,
                annuity: self.v_tilde,
            });
        }
        Ok(self.du - self.u_tilde * self.dv / self.v_tilde)
    }
}

/// Which side of the dichotomy `|sigma_r| = 0` / `|sigma_r| > 0` holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaRegime {
    Zero,
    Positive,
}

/// Rolling CDS curve built from the affine survival transform.
#[derive(Debug, Clone)]
pub struct CdsCurve {
    transform: AffineTransform,
    maturity: f64,
}

impl CdsCurve {
    /// `transform` must cover `[0, T~]`.
    pub fn build(spec: &ModelSpec, transform: AffineTransform) -> Result<Self> {
        if spec.cds_maturity <= spec.horizon {
            return Err(Error::Model("CDS maturity must exceed the horizon".into()));
        }
        Self::from_transform(transform, spec.cds_maturity)
    }

    pub fn from_transform(transform: AffineTransform, maturity: f64) -> Result<Self> {
        if transform.horizon() + 1e-12 < maturity {
            return Err(Error::Domain(format!(
                "transform horizon {} shorter than CDS maturity {maturity}",
                transform.horizon()
            )));
        }
        Ok(Self {
            transform,
            maturity,
        })
    }

    pub fn maturity(&self) -> f64 {
        self.maturity
    }

    pub fn transform(&self) -> &AffineTransform {
        &self.transform
    }

    /// Simpson nodes on `[0, T~ - s]` as `(weight * A~(w), B~(w))`.
    fn quadrature(&self, s: f64) -> Result<Vec<(f64, f64)>> {
        let tau = self.maturity - s;
        if tau < -1e-12 {
            return Err(Error::Domain(format!("curve evaluated at s={s} beyond maturity")));
        }
        let tau = tau.max(0.0);
        let n = SIMPSON_INTERVALS;
        let h = tau / n as f64;
        (0..=n)
            .map(|k| {
                let w = if k == n { tau } else { h * k as f64 };
                let c = match k {
                    0 => 1.0,
                    _ if k == n => 1.0,
                    _ if k % 2 == 1 => 4.0,
                    _ => 2.0,
                };
                let (a, b) = self.transform.eval(w)?;
                Ok((c * h / 3.0 * a, b))
            })
            .collect()
    }

    fn point_with(&self, quad: &[(f64, f64)], tau_ab: (f64, f64), y: f64) -> CurvePoint {
        let (a_t, b_t) = tau_ab;
        let d = a_t * (-b_t * y).exp();
        let (mut v, mut bd) = (0.0, 0.0);
        for &(wa, b) in quad {
            let e = wa * (-b * y).exp();
            v += e;
            bd += b * e;
        }
        CurvePoint {
            u_tilde: 1.0 - d,
            v_tilde: v,
            du: b_t * d,
            dv: -bd,
        }
    }

    /// Curve values at `(s, y)`.
    pub fn point(&self, s: f64, y: f64) -> Result<CurvePoint> {
        Ok(self.row(s, &[y])?[0])
    }

    /// Curve values at `s` for each `y` in `ys`; the quadrature is shared.
    pub fn row(&self, s: f64, ys: &[f64]) -> Result<Vec<CurvePoint>> {
        let quad = self.quadrature(s)?;
        let tau_ab = self.transform.eval((self.maturity - s).max(0.0))?;
        Ok(ys.iter().map(|&y| self.point_with(&quad, tau_ab, y)).collect())
    }

    pub fn u_tilde(&self, s: f64, y: f64) -> Result<f64> {
        Ok(self.point(s, y)?.u_tilde)
    }

    pub fn v_tilde(&self, s: f64, y: f64) -> Result<f64> {
        Ok(self.point(s, y)?.v_tilde)
    }

    /// `sigma_r(s, y)` as a length-1 vector (single factor).
    pub fn sigma_r(&self, s: f64, y: f64) -> Result<DVector<f64>> {
        Ok(DVector::from_element(1, self.point(s, y)?.sigma_r(s, y)?))
    }

    /// `(D~ B~, B~)` at `u = T~ - s`: the bracketing bounds for `sigma_r`.
    pub fn sigma_r_bounds(&self, s: f64, y: f64) -> Result<(f64, f64)> {
        let (a, b) = self.transform.eval(self.maturity - s)?;
        Ok((a * (-b * y).exp() * b, b))
    }

    /// Tabulates the curve on `s_nodes x y_nodes` (all `s < T~`).
    pub fn tabulate(&self, s_nodes: &[f64], y_nodes: &[f64]) -> Result<CurveTable> {
        let mut u = Vec::with_capacity(s_nodes.len());
        let mut v = Vec::with_capacity(s_nodes.len());
        let mut sr = Vec::with_capacity(s_nodes.len());
        for &s in s_nodes {
            let row = self.row(s, y_nodes)?;
            u.push(row.iter().map(|p| p.u_tilde).collect());
            v.push(row.iter().map(|p| p.v_tilde).collect());
            sr.push(
                row.iter()
                    .zip(y_nodes)
                    .map(|(p, &y)| p.sigma_r(s, y))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Ok(CurveTable {
            s_nodes: s_nodes.to_vec(),
            y_nodes: y_nodes.to_vec(),
            u_tilde: u,
            v_tilde: v,
            sigma_r: sr,
        })
    }
}

/// Curve values on a rectangular `(s, y)` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveTable {
    pub s_nodes: Vec<f64>,
    pub y_nodes: Vec<f64>,
    pub u_tilde: Vec<Vec<f64>>,
    pub v_tilde: Vec<Vec<f64>>,
    pub sigma_r: Vec<Vec<f64>>,
}

impl CurveTable {
    /// `sigma_r` at time `s` and space node `j`, linear in `s` between rows.
    pub fn sigma_r_at(&self, s: f64, j: usize) -> f64 {
        let ns = self.s_nodes.len();
        if ns == 1 || s <= self.s_nodes[0] {
            return self.sigma_r[0][j];
        }
        if s >= self.s_nodes[ns - 1] {
            return self.sigma_r[ns - 1][j];
        }
        let i = self.s_nodes.partition_point(|&v| v <= s).clamp(1, ns - 1) - 1;
        let w = (s - self.s_nodes[i]) / (self.s_nodes[i + 1] - self.s_nodes[i]);
        (1.0 - w) * self.sigma_r[i][j] + w * self.sigma_r[i + 1][j]
    }

    /// Regime check over the whole table; mixed sign/zero curves are refused.
    pub fn regime(&self) -> Result<SigmaRegime> {
        let (mut zero, mut positive) = (0usize, 0usize);
        for row in &self.sigma_r {
            for v in row {
                if v.abs() == 0.0 {
                    zero += 1;
                } else {
                    positive += 1;
                }
            }
        }
        match (zero, positive) {
            (_, 0) => Ok(SigmaRegime::Zero),
            (0, _) => Ok(SigmaRegime::Positive),
            _ => Err(Error::MixedRegime { zero, positive }),
        }
    }

    /// Generic fallback: `sigma_r` from central differences of the tabulated
    /// `u~, v~` in `y` (one-sided at the ends).
    pub fn sigma_r_finite_difference(&self) -> Vec<Vec<f64>> {
        let ny = self.y_nodes.len();
        let ys = &self.y_nodes;
        let deriv = |f: &[f64], j: usize| {
            if j == 0 {
                (f[1] - f[0]) / (ys[1] - ys[0])
            } else if j == ny - 1 {
                (f[ny - 1] - f[ny - 2]) / (ys[ny - 1] - ys[ny - 2])
            } else {
                (f[j + 1] - f[j - 1]) / (ys[j + 1] - ys[j - 1])
            }
        };
        self.u_tilde
            .iter()
            .zip(&self.v_tilde)
            .map(|(u, v)| {
                (0..ny)
                    .map(|j| u[j] * (deriv(u, j) / u[j] - deriv(v, j) / v[j]))
                    .collect()
            })
            .collect()
    }

    /// Largest interior residuals of `u~_s + L~u~ - gt(u~ - 1) = 0` and
    /// `v~_s + L~v~ - gt v~ + 1 = 0` under CIR parameters `params`, by
    /// three-point differences in `s` and `y`.
    pub fn pde_residuals(&self, params: &CirParams) -> CurveResiduals {
        let (ns, ny) = (self.s_nodes.len(), self.y_nodes.len());
        let mut out = CurveResiduals::default();
        if ns < 3 || ny < 3 {
            return out;
        }
        let d1 = |xs: &[f64], f: &dyn Fn(usize) -> f64, i: usize| {
            let (h0, h1) = (xs[i] - xs[i - 1], xs[i + 1] - xs[i]);
            (f(i + 1) * h0 * h0 - f(i - 1) * h1 * h1 + f(i) * (h1 * h1 - h0 * h0)) / (h0 * h1 * (h0 + h1))
        };
        let d2 = |xs: &[f64], f: &dyn Fn(usize) -> f64, i: usize| {
            let (h0, h1) = (xs[i] - xs[i - 1], xs[i + 1] - xs[i]);
            2.0 * (f(i + 1) * h0 - f(i) * (h0 + h1) + f(i - 1) * h1) / (h0 * h1 * (h0 + h1))
        };
        for i in 1..ns - 1 {
            for j in 1..ny - 1 {
                let y = self.y_nodes[j];
                let drift = params.kappa * (params.theta - y);
                let half_var = 0.5 * params.xi * params.xi * y;
                let gt = params.intensity.eval(y);
                let gen = |tab: &Vec<Vec<f64>>| {
                    let ds = d1(&self.s_nodes, &|k| tab[k][j], i);
                    let dy = d1(&self.y_nodes, &|k| tab[i][k], j);
                    let dyy = d2(&self.y_nodes, &|k| tab[i][k], j);
                    ds + drift * dy + half_var * dyy
                };
                let u = self.u_tilde[i][j];
                let v = self.v_tilde[i][j];
                let lu = gen(&self.u_tilde);
                let lv = gen(&self.v_tilde);
                out.u = out.u.max((lu - gt * (u - 1.0)).abs());
                out.v = out.v.max((lv - gt * v + 1.0).abs());
                out.v_opposite_sign = out.v_opposite_sign.max((lv - gt * v - 1.0).abs());
            }
        }
        out
    }

    /// CSV with columns `s,y,u_tilde,v_tilde,spread,sigma_r`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let err = |e: csv::Error| Error::Io(e.to_string());
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record(["s", "y", "u_tilde", "v_tilde", "spread", "sigma_r"]).map_err(err)?;
        for (i, &s) in self.s_nodes.iter().enumerate() {
            for (j, &y) in self.y_nodes.iter().enumerate() {
                let (u, v) = (self.u_tilde[i][j], self.v_tilde[i][j]);
                let row = [s, y, u, v, u / v, self.sigma_r[i][j]].map(|x| x.to_string());
                w.write_record(&row).map_err(err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Sup-norm PDE residuals of a tabulated curve.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CurveResiduals {
    pub u: f64,
    pub v: f64,
    /// residual of the annuity equation with source `-1` in place of `+1`
    pub v_opposite_sign: f64,
}

/// Coefficients of the synthetic rolling-CDS asset at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct RollingCds {
    /// `sigma_r' a nu~ - gamma~`
    pub drift: f64,
    /// `a' sigma_r`
    pub vol: DVector<f64>,
    /// jump at default (per dollar)
    pub jump: f64,
}

pub fn rolling_cds_coefficients(point: &PointCoefficients, sigma_r: &DVector<f64>) -> RollingCds {
    let drift = (sigma_r.transpose() * &point.a * &point.nu_tilde)[(0, 0)] - point.gamma_tilde;
    RollingCds {
        drift,
        vol: point.a.transpose() * sigma_r,
        jump: 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affine_cir::CirParams;
    use crate::model::AffineIntensity;

    fn curve(g: AffineIntensity) -> CdsCurve {
        let p = CirParams {
            kappa: 0.6186,
            theta: 0.0242,
            xi: 0.1,
            intensity: g,
        };
        CdsCurve::from_transform(AffineTransform::new(p, 2.0).unwrap(), 2.0).unwrap()
    }

    #[test]
    fn terminal_values() {
        let c = curve(AffineIntensity::linear(0.7614));
        let p = c.point(2.0, 0.06).unwrap();
        assert_eq!(p.u_tilde, 0.0);
        assert_eq!(p.v_tilde, 0.0);
        assert!(matches!(c.sigma_r(2.0, 0.06), Err(Error::SingularCurve { .. })));
    }

    #[test]
    fn zero_intensity() {
        let c = curve(AffineIntensity::linear(0.0));
        for s in [0.0, 0.5, 1.5] {
            let p = c.point(s, 0.3).unwrap();
            assert_eq!(p.u_tilde, 0.0);
            assert!((p.v_tilde - (2.0 - s)).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_intensity_gives_zero_sigma_r() {
        let c = curve(AffineIntensity { level: 0.4, slope: 0.0 });
        for s in [0.0, 0.7] {
            for y in [0.01, 0.5] {
                assert_eq!(c.sigma_r(s, y).unwrap()[0], 0.0);
            }
        }
        let t = c.tabulate(&[0.0, 0.5], &[0.1, 0.2]).unwrap();
        assert_eq!(t.regime().unwrap(), SigmaRegime::Zero);
    }

    #[test]
    fn bracketing_and_fd() {
        let c = curve(AffineIntensity::linear(0.7614));
        let s_nodes: Vec<f64> = (0..=10).map(|i| 0.1 * i as f64).collect();
        let y_nodes: Vec<f64> = (0..=60).map(|j| 0.005 + 0.01 * j as f64).collect();
        let t = c.tabulate(&s_nodes, &y_nodes).unwrap();
        assert_eq!(t.regime().unwrap(), SigmaRegime::Positive);
        for (i, &s) in s_nodes.iter().enumerate() {
            for (j, &y) in y_nodes.iter().enumerate() {
                let (lo, hi) = c.sigma_r_bounds(s, y).unwrap();
                let v = t.sigma_r[i][j];
                assert!(v - lo >= -1e-10 && hi - v >= -1e-10);
                assert!(t.u_tilde[i][j] / t.v_tilde[i][j] > 0.0);
            }
        }
        let fd = t.sigma_r_finite_difference();
        for i in 0..s_nodes.len() {
            for j in 1..y_nodes.len() - 1 {
                assert!((fd[i][j] - t.sigma_r[i][j]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn curve_pde_residuals_second_order() {
        let c = curve(AffineIntensity::linear(0.7614));
        let params = *c.transform().params();
        let res = |n: usize| {
            let s_nodes: Vec<f64> = (0..=n).map(|i| 1.5 * i as f64 / n as f64).collect();
            let y_nodes: Vec<f64> = (0..=n).map(|j| 0.01 + 0.5 * j as f64 / n as f64).collect();
            c.tabulate(&s_nodes, &y_nodes).unwrap().pde_residuals(&params)
        };
        let (coarse, fine) = (res(20), res(40));
        assert!(coarse.u >= 3.0 * fine.u && coarse.v >= 3.0 * fine.v, "{coarse:?} {fine:?}");
        assert!(fine.u < 1e-3 && fine.v < 1e-3);
        // the source of the annuity equation has a definite sign
        assert!(fine.v_opposite_sign > 1.9);
    }

    #[test]
    fn mixed_regime_refused() {
        let t = CurveTable {
            s_nodes: vec![0.0],
            y_nodes: vec![0.1, 0.2],
            u_tilde: vec![vec![0.1, 0.1]],
            v_tilde: vec![vec![1.0, 1.0]],
            sigma_r: vec![vec![0.0, 0.3]],
        };
        assert!(matches!(t.regime(), Err(Error::MixedRegime { zero: 1, positive: 1 })));
    }

    #[test]
    fn rolling_coefficients() {
        let p = PointCoefficients {
            b: DVector::from_element(1, 0.0),
            a: nalgebra::DMatrix::from_element(1, 1, 0.2),
            mu_e: DVector::from_element(1, 0.1),
            sigma_e: nalgebra::DMatrix::from_element(1, 1, 0.3),
            rho: nalgebra::DMatrix::from_element(1, 1, 1.0),
            loss: DVector::from_element(1, 0.5),
            gamma: 0.1,
            gamma_tilde: 0.15,
            nu_tilde: DVector::from_element(1, 2.0),
        };
        let r = rolling_cds_coefficients(&p, &DVector::from_element(1, 0.0));
        assert_eq!((r.drift, r.vol[0], r.jump), (-0.15, 0.0, 1.0));
        let r = rolling_cds_coefficients(&p, &DVector::from_element(1, 0.5));
        assert!((r.drift - (0.5 * 0.2 * 2.0 - 0.15)).abs() < 1e-15);
        assert!((r.vol[0] - 0.1).abs() < 1e-15);
        let mut q = p.clone();
        q.nu_tilde[0] = 0.0;
        assert_eq!(rolling_cds_coefficients(&q, &DVector::from_element(1, 0.5)).drift, -0.15);
    }
}

//! TOML run configuration and its translation into a model instance.

use crate::affine_cir::{ptilde_params, AffineTransform, CirParams};
use crate::cds_curve::{CdsCurve, CurveTable};
use crate::error::{Error, Result};
use crate::hjb::sigma_table;
use crate::model::{
    psd_sqrt, AffineIntensity, CirFactor, CirMarket, GridSpec, MarketMode, ModelSpec, RiskPremia, ScalarField,
};
use crate::post_default::{build_psi, PsiAffine, PsiParams};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeName {
    Complete,
    Incomplete,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub mode: ModeName,
    pub alpha: f64,
    pub horizon: f64,
    pub cds_maturity: f64,
    /// incomplete mode only
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FactorSection {
    pub kappa: f64,
    pub theta: f64,
    pub xi: f64,
}

/// Equity block; give exactly one of `sigma` (volatility matrix) or
/// `covariance` (whose symmetric square root is used).
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct EquitySection {
    pub nu: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance: Option<Vec<Vec<f64>>>,
    pub rho: Vec<f64>,
    pub loss: Vec<f64>,
}

/// Intensities `gamma(y) = gamma y` and `gamma~(y) = ratio gamma y`.
/// Give `gamma` directly or `default_probability`, the one-year default
/// probability at the long-run factor level.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct IntensitySection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_probability: Option<f64>,
    pub ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum PostDefaultSection {
    /// `psi = 0`
    #[default]
    Zero,
    /// trading continues in the named surviving equity
    SurvivingAsset { asset: usize },
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub nt: usize,
    pub nx: usize,
    pub x_min: f64,
    pub x_max: f64,
    /// range of the factor reported in figure tables
    pub plot_x_min: f64,
    pub plot_x_max: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    /// bond notionals `q`
    pub notionals: Vec<f64>,
    /// factor level of the Monte Carlo checks
    pub x0: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloSection {
    pub paths: usize,
    pub dt: f64,
    pub seed: u64,
}

/// Reference values the run is checked against. All fields are
/// optional so user configs can omit the section.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionSection {
    pub tolerance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_tilde: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_tilde: Option<f64>,
    /// expected `gamma` implied by `gamma_default_probability`
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_default_probability: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelSection,
    pub factor: FactorSection,
    pub equity: EquitySection,
    pub intensity: IntensitySection,
    #[serde(default)]
    pub post_default: PostDefaultSection,
    pub grid: GridSection,
    pub experiment: ExperimentSection,
    pub monte_carlo: MonteCarloSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regression: Option<RegressionSection>,
}

pub(crate) fn cfg_err(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

/// `gamma` such that `exp(-gamma theta) = 1 - p`.
pub fn implied_gamma(default_probability: f64, theta: f64) -> f64 {
    -(1.0 - default_probability).ln() / theta
}

/// `gamma` such that `E[exp(-gamma int_0^T X)] = 1 - p` for the CIR factor
/// under the physical measure started at `theta`, by bisection on the
/// closed-form transform.
pub fn implied_gamma_physical(default_probability: f64, factor: CirFactor, horizon: f64) -> f64 {
    let survival = |g: f64| {
        let params = CirParams {
            kappa: factor.kappa,
            theta: factor.theta,
            xi: factor.xi,
            intensity: AffineIntensity::linear(g),
        };
        let (a, b) = AffineTransform::closed_form(&params, horizon);
        a * (-b * factor.theta).exp()
    };
    let target = 1.0 - default_probability;
    let (mut lo, mut hi) = (0.0, 1.0);
    while survival(hi) > target {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if survival(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn matrix(rows: &[Vec<f64>], k: usize, path: &str) -> Result<DMatrix<f64>> {
    if rows.len() != k || rows.iter().any(|r| r.len() != k) {
        return Err(cfg_err(path, format!("expected a {k}x{k} matrix")));
    }
    Ok(DMatrix::from_fn(k, k, |i, j| rows[i][j]))
}

/// A configured experiment: market, grid and post-default value.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: Config,
    pub market: CirMarket,
    /// spec with `phi = 0`
    pub spec: ModelSpec,
    pub grid: GridSpec,
    pub psi: Option<Arc<PsiAffine>>,
}

impl Experiment {
    pub fn with_notional(&self, q: f64) -> ModelSpec {
        self.spec.with_notional(q)
    }

    /// Survival transform under the pricing measure over the CDS maturity,
    /// and `sigma_r` tabulated on the grid.
    pub fn curve(&self) -> Result<(AffineTransform, CurveTable)> {
        let params = ptilde_params(&self.spec)?;
        let transform = AffineTransform::new(params, self.spec.cds_maturity.max(self.spec.horizon))?;
        let curve = CdsCurve::build(&self.spec, transform.clone())?;
        Ok((transform, sigma_table(&curve, &self.grid)?))
    }

    /// Space nodes inside the reported range.
    pub fn plot_indices(&self) -> Vec<usize> {
        let g = &self.config.grid;
        self.grid
            .x_nodes
            .iter()
            .enumerate()
            .filter(|(_, &x)| x >= g.plot_x_min - 1e-12 && x <= g.plot_x_max + 1e-12)
            .map(|(j, _)| j)
            .collect()
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::de::Deserializer::parse(text).map_err(|e| cfg_err("", e.to_string()))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            cfg_err(&path, e.into_inner().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| cfg_err(&path.display().to_string(), e.to_string()))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn gamma(&self) -> Result<f64> {
        match (self.intensity.gamma, self.intensity.default_probability) {
            (Some(g), None) => Ok(g),
            (None, Some(p)) if p > 0.0 && p < 1.0 => Ok(implied_gamma(p, self.factor.theta)),
            (None, Some(p)) => Err(cfg_err("intensity.default_probability", format!("must lie in (0,1), got {p}"))),
            _ => Err(cfg_err("intensity", "give exactly one of `gamma` or `default_probability`")),
        }
    }

    pub fn market(&self) -> Result<CirMarket> {
        let e = &self.equity;
        let k = e.nu.len();
        if k == 0 {
            return Err(cfg_err("equity.nu", "at least one equity is required"));
        }
        for (name, v) in [("equity.rho", &e.rho), ("equity.loss", &e.loss)] {
            if v.len() != k {
                return Err(cfg_err(name, format!("expected length {k}, got {}", v.len())));
            }
        }
        let sigma = match (&e.sigma, &e.covariance) {
            (Some(s), None) => matrix(s, k, "equity.sigma")?,
            (None, Some(c)) => {
                let cov = matrix(c, k, "equity.covariance")?;
                psd_sqrt(&cov).map_err(|err| cfg_err("equity.covariance", err.to_string()))?
            }
            _ => return Err(cfg_err("equity", "give exactly one of `sigma` or `covariance`")),
        };
        let rho = DVector::from_vec(e.rho.clone());
        let rr = rho.norm_squared();
        if rr >= 1.0 && self.model.mode == ModeName::Incomplete {
            return Err(cfg_err("equity.rho", format!("rho'rho = {rr} must be < 1")));
        }
        let gamma = self.gamma()?;
        if !(self.intensity.ratio > 0.0) {
            return Err(cfg_err("intensity.ratio", "must be positive"));
        }
        let f = &self.factor;
        Ok(CirMarket {
            factor: CirFactor {
                kappa: f.kappa,
                theta: f.theta,
                xi: f.xi,
            },
            nu: DVector::from_vec(e.nu.clone()),
            sigma,
            rho,
            loss: DVector::from_vec(e.loss.clone()),
            gamma: AffineIntensity::linear(gamma),
            gamma_tilde: AffineIntensity::linear(gamma * self.intensity.ratio),
            risk_premia: RiskPremia::Minimal,
        })
    }

    pub fn mode(&self) -> Result<MarketMode> {
        match self.model.mode {
            ModeName::Complete => Ok(MarketMode::Complete),
            ModeName::Incomplete => {
                let eps = self
                    .model
                    .epsilon1
                    .ok_or_else(|| cfg_err("model.epsilon1", "required in incomplete mode"))?;
                Ok(MarketMode::Incomplete { epsilon1: eps })
            }
        }
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        let g = &self.grid;
        GridSpec::uniform(self.model.horizon, g.nt, g.x_min, g.x_max, g.nx).map_err(|e| cfg_err("grid", e.to_string()))
    }

    /// Builds the market, grid and post-default value and validates them.
    pub fn build(&self) -> Result<Experiment> {
        let market = self.market()?;
        let mode = self.mode()?;
        if mode == MarketMode::Complete && market.rho.iter().any(|r| (*r - 1.0).abs() > 0.0) {
            return Err(cfg_err("equity.rho", "complete mode requires rho = 1"));
        }
        let psi = match self.post_default {
            PostDefaultSection::Zero => None,
            PostDefaultSection::SurvivingAsset { asset } => {
                if asset >= market.k() {
                    return Err(cfg_err("post_default.asset", format!("no equity with index {asset}")));
                }
                let params = PsiParams::from_market(&market, asset, self.model.alpha);
                Some(Arc::new(build_psi(params, self.model.horizon)?))
            }
        };
        let post_default = psi.as_ref().map_or_else(ScalarField::zero, |p| p.to_field());
        let spec = ModelSpec {
            coefficients: Arc::new(market.clone()),
            payoff: ScalarField::zero(),
            post_default,
            recovery: ScalarField::zero(),
            alpha: self.model.alpha,
            horizon: self.model.horizon,
            cds_maturity: self.model.cds_maturity,
            mode,
        };
        let grid = self.grid_spec()?;
        spec.validate(&grid).map_err(|e| cfg_err("model", e.to_string()))?;
        if self.grid.plot_x_min < self.grid.x_min || self.grid.plot_x_max > self.grid.x_max {
            return Err(cfg_err("grid.plot_x_min", "reported range must lie inside the grid"));
        }
        Ok(Experiment {
            config: self.clone(),
            market,
            spec,
            grid,
            psi,
        })
    }

    /// One equity, complete market with a defaultable bond.
    pub fn complete_example() -> Self {
        Config {
            model: ModelSection {
                mode: ModeName::Complete,
                alpha: 3.0,
                horizon: 1.0,
                cds_maturity: 2.0,
                epsilon1: None,
            },
            factor: FactorSection {
                kappa: 0.25,
                theta: 0.06,
                xi: 0.1,
            },
            equity: EquitySection {
                nu: vec![4.0762],
                sigma: Some(vec![vec![0.9762]]),
                covariance: None,
                rho: vec![1.0],
                loss: vec![0.5],
            },
            intensity: IntensitySection {
                gamma: Some(0.5076),
                default_probability: None,
                ratio: 1.5,
            },
            post_default: PostDefaultSection::Zero,
            grid: GridSection {
                nt: 200,
                nx: 1000,
                x_min: 0.001,
                x_max: 1.0,
                plot_x_min: 0.01,
                plot_x_max: 0.15,
            },
            experiment: ExperimentSection {
                notionals: vec![1.0, 3.0, 5.0, 10.0],
                x0: 0.06,
            },
            monte_carlo: MonteCarloSection {
                paths: 100_000,
                dt: 1e-3,
                seed: 20_240_501,
            },
            regression: Some(RegressionSection {
                tolerance: 5e-5,
                kappa_tilde: Some(0.6186),
                theta_tilde: Some(0.0242),
                gamma: Some(0.5076),
                gamma_default_probability: Some(0.03),
            }),
        }
    }

    /// Two equities, the second defaultable, incomplete market.
    pub fn incomplete_example() -> Self {
        let mut c = Self::complete_example();
        c.model.mode = ModeName::Incomplete;
        c.model.epsilon1 = Some(0.1);
        c.equity = EquitySection {
            nu: vec![2.235, 3.672],
            sigma: None,
            covariance: Some(vec![vec![0.277, 0.310], vec![0.310, 0.953]]),
            rho: vec![-0.530, -0.320],
            loss: vec![0.0, 0.5],
        };
        c.post_default = PostDefaultSection::SurvivingAsset { asset: 0 };
        c.regression = Some(RegressionSection {
            tolerance: 5e-5,
            kappa_tilde: Some(0.0177),
            theta_tilde: None,
            gamma: None,
            gamma_default_probability: None,
        });
        c
    }
}

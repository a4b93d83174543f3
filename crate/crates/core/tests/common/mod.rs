#![allow(dead_code)]

use cdsopt::affine_cir::{ptilde_params, AffineTransform};
use cdsopt::cds_curve::{CdsCurve, CurveTable};
use cdsopt::hjb::sigma_table;
use cdsopt::model::{AffineIntensity, CirFactor, CirMarket, GridSpec, MarketMode, ModelSpec, RiskPremia, ScalarField};
use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

pub const FACTOR: CirFactor = CirFactor {
    kappa: 0.25,
    theta: 0.06,
    xi: 0.1,
};

/// One equity with scalar inputs.
pub fn single_equity(nu: f64, sigma: f64, loss: f64, gamma: AffineIntensity, gamma_tilde: AffineIntensity) -> CirMarket {
    CirMarket {
        factor: FACTOR,
        nu: DVector::from_element(1, nu),
        sigma: DMatrix::from_element(1, 1, sigma),
        rho: DVector::from_element(1, 1.0),
        loss: DVector::from_element(1, loss),
        gamma,
        gamma_tilde,
        risk_premia: RiskPremia::Minimal,
    }
}

pub fn spec(market: CirMarket, mode: MarketMode) -> ModelSpec {
    ModelSpec {
        coefficients: Arc::new(market),
        payoff: ScalarField::zero(),
        post_default: ScalarField::zero(),
        recovery: ScalarField::zero(),
        alpha: 3.0,
        horizon: 1.0,
        cds_maturity: 2.0,
        mode,
    }
}

pub fn grid(nt: usize, nx: usize) -> GridSpec {
    GridSpec::uniform(1.0, nt, 0.001, 1.0, nx).unwrap()
}

pub fn curve_table(spec: &ModelSpec, grid: &GridSpec) -> CurveTable {
    let params = ptilde_params(spec).unwrap();
    let transform = AffineTransform::new(params, spec.cds_maturity).unwrap();
    sigma_table(&CdsCurve::build(spec, transform).unwrap(), grid).unwrap()
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Market price of risk that makes the equity drift exactly compensate
/// the expected loss, so the spot measure has no factor premium.
pub fn neutral_nu(gamma_tilde_slope: f64, loss: f64, sigma: f64) -> f64 {
    gamma_tilde_slope * loss / sigma
}

//! Utility-indifference prices of a defaultable zero-coupon bond and the
//! relative benefit of access to the CDS.
//!
//! Holding `q` bonds adds the claim `phi = q` on survival, so the price per
//! bond is `(G(q) - G(0))/q`. It does not depend on initial wealth: no
//! wealth argument exists anywhere in the value surfaces.

use crate::cds_curve::CurveTable;
use crate::error::{Error, Result};
use crate::hjb::{solve_linear_complete, solve_nocds_benchmark, solve_semilinear_incomplete, SolverOptions, ValueSurface};
use crate::model::{GridSpec, MarketMode, ModelSpec, ScalarField};
use rayon::prelude::*;

/// Certainty equivalent with the CDS: the linear PDE in the complete
/// market and the semi-linear one otherwise.
pub fn solve_with_cds(spec: &ModelSpec, grid: &GridSpec, sigma: &CurveTable, options: SolverOptions) -> Result<ValueSurface> {
    match spec.mode {
        MarketMode::Complete => solve_linear_complete(spec, grid, Some(sigma), options),
        MarketMode::Incomplete { .. } => solve_semilinear_incomplete(spec, grid, sigma, options),
    }
}

fn same_grid(a: &ValueSurface, b: &ValueSurface) -> Result<()> {
    if a.t_nodes != b.t_nodes || a.x_nodes != b.x_nodes {
        return Err(Error::Domain("surfaces live on different grids".into()));
    }
    Ok(())
}

/// `p = (G(q) - G(0))/q` node by node.
pub fn indifference_price(g_q: &ValueSurface, g_0: &ValueSurface, q: f64) -> Result<Vec<Vec<f64>>> {
    if q == 0.0 || !q.is_finite() {
        return Err(Error::Domain(format!("indifference price needs a finite nonzero notional, got {q}")));
    }
    same_grid(g_q, g_0)?;
    Ok(g_q
        .g
        .iter()
        .zip(&g_0.g)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) / q).collect())
        .collect())
}

/// Same market with recovery `R(tau, X_tau)` on `q` bonds folded into the
/// value at default: `psi -> psi + q R`. Constant recoveries must be
/// nonnegative.
pub fn with_recovery(spec: &ModelSpec, q: f64, recovery: &ScalarField) -> Result<ModelSpec> {
    if let ScalarField::Constant(r) = recovery {
        if !(*r >= 0.0) {
            return Err(Error::Domain(format!("recovery must be nonnegative, got {r}")));
        }
    }
    Ok(ModelSpec {
        recovery: spec.recovery.add_scaled(q, recovery),
        ..spec.clone()
    })
}

/// `CE_cds / CE_nocds - 1` node by node; nodes with a zero or non-finite
/// denominator are masked as `NaN` with a warning.
pub fn relative_benefit(ce_cds: &ValueSurface, ce_nocds: &ValueSurface) -> Result<Vec<Vec<f64>>> {
    same_grid(ce_cds, ce_nocds)?;
    let mut masked = 0usize;
    let out = ce_cds
        .g
        .iter()
        .zip(&ce_nocds.g)
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(x, y)| {
                    if *y == 0.0 || !y.is_finite() {
                        masked += 1;
                        f64::NAN
                    } else {
                        x / y - 1.0
                    }
                })
                .collect()
        })
        .collect();
    if masked > 0 {
        log::warn!("relative benefit: {masked} nodes masked for a zero benchmark value");
    }
    Ok(out)
}

/// Prices and certainty equivalents for a set of notionals.
#[derive(Debug, Clone)]
pub struct PriceSurface {
    pub notionals: Vec<f64>,
    pub t_nodes: Vec<f64>,
    pub x_nodes: Vec<f64>,
    /// certainty equivalent with the CDS and no bonds
    pub ce_zero: ValueSurface,
    /// `ce_cds[n]`: with the CDS, holding `notionals[n]` bonds
    pub ce_cds: Vec<ValueSurface>,
    /// `ce_nocds[n]`: equity-only benchmark with the same claim
    pub ce_nocds: Vec<ValueSurface>,
    /// `price[n][i][j]`
    pub price: Vec<Vec<Vec<f64>>>,
    /// `relative_benefit[n][i][j]`; empty without the benchmark
    pub relative_benefit: Vec<Vec<Vec<f64>>>,
}

impl PriceSurface {
    /// Solves for every notional; runs the equity-only benchmark when
    /// `benchmark` is set.
    pub fn build(
        spec: &ModelSpec,
        grid: &GridSpec,
        sigma: &CurveTable,
        notionals: &[f64],
        options: SolverOptions,
        benchmark: bool,
    ) -> Result<Self> {
        if let Some(q) = notionals.iter().find(|q| **q == 0.0 || !q.is_finite()) {
            return Err(Error::Domain(format!("notionals must be finite and nonzero, got {q}")));
        }
        let ce_zero = solve_with_cds(&spec.with_notional(0.0), grid, sigma, options)?;
        type Run = (ValueSurface, Option<ValueSurface>);
        let runs: Vec<Run> = notionals
            .par_iter()
            .map(|&q| {
                let s = spec.with_notional(q);
                let cds = solve_with_cds(&s, grid, sigma, options)?;
                let nocds = if benchmark {
                    Some(solve_nocds_benchmark(&s, grid, options)?)
                } else {
                    None
                };
                Ok((cds, nocds))
            })
            .collect::<Result<_>>()?;
        let mut out = PriceSurface {
            notionals: notionals.to_vec(),
            t_nodes: grid.t_nodes.clone(),
            x_nodes: grid.x_nodes.clone(),
            price: Vec::new(),
            relative_benefit: Vec::new(),
            ce_cds: Vec::new(),
            ce_nocds: Vec::new(),
            ce_zero,
        };
        for (&q, (cds, nocds)) in notionals.iter().zip(runs) {
            out.price.push(indifference_price(&cds, &out.ce_zero, q)?);
            if let Some(nc) = nocds {
                out.relative_benefit.push(relative_benefit(&cds, &nc)?);
                out.ce_nocds.push(nc);
            }
            out.ce_cds.push(cds);
        }
        Ok(out)
    }

    /// Largest spread of the price across notionals at time row `i`,
    /// relative to the mean price there, over the space nodes `cols`.
    pub fn cross_notional_spread(&self, i: usize, cols: &[usize]) -> f64 {
        cols.iter()
            .map(|&j| {
                let vals: Vec<f64> = self.price.iter().map(|p| p[i][j]).collect();
                let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                (hi - lo) / mean.abs()
            })
            .fold(0.0, f64::max)
    }
}

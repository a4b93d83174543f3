mod common;

use cdsopt::affine_cir::{ptilde_params, AffineTransform};
use cdsopt::config::Config;
use cdsopt::hjb::SolverOptions;
use cdsopt::model::{AffineIntensity, MarketMode, ModelSpec, ScalarField};
use cdsopt::pricing::{indifference_price, solve_with_cds, with_recovery, PriceSurface};
use cdsopt::Error;
use common::*;

fn recovery_price(spec: &ModelSpec, q: f64, r: f64) -> Vec<Vec<f64>> {
    let g = grid(100, 500);
    let tab = curve_table(spec, &g);
    let zero = solve_with_cds(&spec.with_notional(0.0), &g, &tab, SolverOptions::default()).unwrap();
    let s = with_recovery(&spec.with_notional(q), q, &ScalarField::Constant(r)).unwrap();
    let held = solve_with_cds(&s, &g, &tab, SolverOptions::default()).unwrap();
    indifference_price(&held, &zero, q).unwrap()
}

fn complete_spec() -> ModelSpec {
    let m = single_equity(0.6, 0.8, 0.4, AffineIntensity::linear(0.5), AffineIntensity::linear(0.76));
    spec(m, MarketMode::Complete)
}

/// Columns of `grid(100, 500)` inside [0.01, 0.5].
fn interior() -> Vec<(usize, f64)> {
    grid(100, 500).x_nodes.into_iter().enumerate().filter(|(_, x)| (0.01..=0.5).contains(x)).collect()
}

#[test]
fn complete_price_is_pricing_measure_survival() {
    let s = complete_spec();
    let tr = AffineTransform::new(ptilde_params(&s).unwrap(), 1.0).unwrap();
    let p = recovery_price(&s, 2.0, 0.0);
    for (j, x) in interior() {
        let exact = tr.survival(1.0, x).unwrap();
        assert!((p[0][j] - exact).abs() < 1e-4, "x={x}: {} vs {exact}", p[0][j]);
    }
}

#[test]
fn zero_recovery_leaves_spec_unchanged() {
    let s = Config::incomplete_example().build().unwrap().spec;
    let r = with_recovery(&s, 3.0, &ScalarField::Constant(0.0)).unwrap();
    for t in [0.0, 0.4, 1.0] {
        for x in [0.01, 0.06, 0.3] {
            assert_eq!(r.psi(t, &[x]), s.psi(t, &[x]));
        }
    }
}

#[test]
fn recovery_enters_value_at_default_but_not_terminal_check() {
    let s = complete_spec();
    let r = with_recovery(&s.with_notional(2.0), 2.0, &ScalarField::Constant(0.4)).unwrap();
    assert_eq!(r.psi(1.0, &[0.05]), 0.8);
    r.validate(&grid(10, 50)).unwrap();
}

#[test]
fn full_recovery_makes_bond_riskless() {
    let gt = AffineIntensity::linear(0.76);
    let s = spec(single_equity(0.6, 0.8, 0.4, gt, gt), MarketMode::Complete);
    let p = recovery_price(&s, 1.0, 1.0);
    for (j, x) in interior() {
        assert!((p[0][j] - 1.0).abs() < 1e-3, "x={x}: {}", p[0][j]);
    }
}

#[test]
fn partial_recovery_mixes_survival_and_recovery() {
    let s = complete_spec();
    let tr = AffineTransform::new(ptilde_params(&s).unwrap(), 1.0).unwrap();
    let p = recovery_price(&s, 1.0, 0.4);
    for (j, x) in interior() {
        let surv = tr.survival(1.0, x).unwrap();
        let exact = surv + 0.4 * (1.0 - surv);
        assert!((p[0][j] - exact).abs() < 1e-4, "x={x}: {} vs {exact}", p[0][j]);
    }
}

#[test]
fn price_increases_with_recovery() {
    for s in [complete_spec(), Config::incomplete_example().build().unwrap().spec] {
        let prices: Vec<_> = [0.0, 0.3, 0.6].iter().map(|r| recovery_price(&s, 1.0, *r)).collect();
        for (j, _) in interior() {
            assert!(prices[0][0][j] <= prices[1][0][j] + 1e-6 && prices[1][0][j] <= prices[2][0][j] + 1e-6);
            assert!(prices[2][0][j] > prices[0][0][j]);
        }
    }
}

#[test]
fn negative_recovery_refused() {
    let s = complete_spec();
    assert!(matches!(with_recovery(&s, 1.0, &ScalarField::Constant(-0.1)), Err(Error::Domain(_))));
}

#[test]
fn price_surface_rejects_zero_notional() {
    let s = complete_spec();
    let g = grid(10, 50);
    let tab = curve_table(&s, &g);
    let r = PriceSurface::build(&s, &g, &tab, &[1.0, 0.0], SolverOptions::default(), false);
    assert!(matches!(r, Err(Error::Domain(_))));
}

#[test]
fn price_surface_benchmark_is_optional() {
    let s = complete_spec();
    let g = grid(20, 100);
    let tab = curve_table(&s, &g);
    let with = PriceSurface::build(&s, &g, &tab, &[1.0, 4.0], SolverOptions::default(), true).unwrap();
    let without = PriceSurface::build(&s, &g, &tab, &[1.0, 4.0], SolverOptions::default(), false).unwrap();
    assert_eq!(with.price, without.price);
    assert_eq!(with.relative_benefit.len(), 2);
    assert!(without.relative_benefit.is_empty() && without.ce_nocds.is_empty());
}

#[test]
fn no_pricing_default_prices_at_par() {
    // the PDE requires positive intensities, so use the path estimator
    let zero = AffineIntensity::linear(0.0);
    let s = spec(single_equity(0.6, 0.8, 0.4, AffineIntensity::linear(0.5), zero), MarketMode::Complete);
    let est = cdsopt::monte_carlo::pricing_survival(&s, &cdsopt::monte_carlo::SimConfig::new(200, 0.01, 1), 0.0, 0.05).unwrap();
    assert_eq!((est.mean, est.stderr), (1.0, 0.0));
}

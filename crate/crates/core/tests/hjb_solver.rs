mod common;

use cdsopt::affine_cir::{AffineTransform, CirParams};
use cdsopt::config::Config;
use cdsopt::hjb::{
    extract_policies, solve_hamiltonian, solve_linear_complete, solve_localized, solve_nocds_benchmark,
    solve_semilinear_incomplete, Mollifier, SolverOptions,
};
use cdsopt::model::{AffineIntensity, GridSpec, MarketMode, ScalarField};
use cdsopt::Error;
use common::*;
use proptest::prelude::*;

#[test]
fn zero_data_gives_zero_surface() {
    let gt = AffineIntensity::linear(0.76);
    let m = single_equity(neutral_nu(0.76, 0.4, 0.8), 0.8, 0.4, gt, gt);
    let s = spec(m, MarketMode::Complete);
    let g = grid(20, 100);
    let out = solve_linear_complete(&s, &g, None, SolverOptions::default()).unwrap();
    let worst = out.g.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
    assert!(worst < 1e-12, "{worst}");
}

#[test]
fn survival_claim_matches_affine_transform() {
    // risk-neutral drift and equal intensities: Q_c = 0 and the two
    // measures agree
    let gt = AffineIntensity::linear(0.76);
    let m = single_equity(neutral_nu(0.76, 0.4, 0.8), 0.8, 0.4, gt, gt);
    let q = 2.5;
    let s = spec(m, MarketMode::Complete).with_notional(q);
    let g = grid(200, 1000);
    let out = solve_linear_complete(&s, &g, None, SolverOptions::default()).unwrap();
    let params = CirParams {
        kappa: FACTOR.kappa,
        theta: FACTOR.theta,
        xi: FACTOR.xi,
        intensity: gt,
    };
    let (a, b) = AffineTransform::closed_form(&params, 1.0);
    for (j, &x) in g.x_nodes.iter().enumerate().filter(|(_, x)| **x >= 0.01 && **x <= 0.5) {
        let exact = q * a * (-b * x).exp();
        assert!(((out.g[0][j] - exact) / exact).abs() < 1e-4, "x={x}: {} vs {exact}", out.g[0][j]);
    }
}

#[test]
fn merton_benchmark_matches_exponential_transform() {
    // uncorrelated equity without default: exp(-alpha G) solves a linear
    // PDE whose solution is the CIR transform with intensity nu^2 y / 2
    let nu = 1.3;
    let mut m = single_equity(nu, 0.9, 1.0, AffineIntensity::linear(0.0), AffineIntensity::linear(0.0));
    m.rho[0] = 0.0;
    let q = 0.7;
    let s = spec(m, MarketMode::Incomplete { epsilon1: 0.1 }).with_notional(q);
    let g = grid(200, 1000);
    let out = solve_nocds_benchmark(&s, &g, SolverOptions::default()).unwrap();
    let params = CirParams {
        kappa: FACTOR.kappa,
        theta: FACTOR.theta,
        xi: FACTOR.xi,
        intensity: AffineIntensity::linear(0.5 * nu * nu),
    };
    for (i, &t) in g.t_nodes.iter().enumerate().step_by(40) {
        let (a, b) = AffineTransform::closed_form(&params, 1.0 - t);
        for (j, &x) in g.x_nodes.iter().enumerate().step_by(10) {
            let exact = q - (a.ln() - b * x) / s.alpha;
            assert!((out.g[i][j] - exact).abs() < 1e-5, "t={t} x={x}: {} vs {exact}", out.g[i][j]);
        }
    }
}

#[test]
fn nocds_zero_claim_zero_premium_is_zero() {
    let mut m = single_equity(0.0, 0.9, 1.0, AffineIntensity::linear(0.0), AffineIntensity::linear(0.0));
    m.rho[0] = 0.3;
    let s = spec(m, MarketMode::Incomplete { epsilon1: 0.1 });
    let out = solve_nocds_benchmark(&s, &grid(20, 100), SolverOptions::default()).unwrap();
    assert!(out.g.iter().flatten().all(|v| v.abs() < 1e-14));
}

#[test]
fn hamiltonian_form_reproduces_linear_form() {
    let e = Config::complete_example().build().unwrap();
    let s = e.with_notional(1.0);
    let g = grid(50, 250);
    let tab = curve_table(&s, &g);
    let lin = solve_linear_complete(&s, &g, Some(&tab), SolverOptions::default()).unwrap();
    let ham = solve_hamiltonian(&s, &g, &tab, None, SolverOptions::default()).unwrap();
    assert!(max_abs_diff(&lin.g, &ham.g) < 1e-8, "{}", max_abs_diff(&lin.g, &ham.g));
}

#[test]
fn residual_shrinks_with_refinement() {
    for c in [Config::complete_example(), Config::incomplete_example()] {
        let e = c.build().unwrap();
        let s = e.with_notional(1.0);
        let mut residuals = Vec::new();
        for (nt, nx) in [(50, 250), (100, 500)] {
            let g = grid(nt, nx);
            let tab = curve_table(&s, &g);
            residuals.push(solve_hamiltonian(&s, &g, &tab, None, SolverOptions::default()).unwrap().max_residual);
        }
        assert!(residuals[0] >= 3.0 * residuals[1], "{:?}: {residuals:?}", c.model.mode);
    }
}

#[test]
fn surface_invariants() {
    let e = Config::incomplete_example().build().unwrap();
    let q = 3.0;
    let s = e.with_notional(q);
    let g = grid(40, 200);
    let tab = curve_table(&s, &g);
    let out = solve_semilinear_incomplete(&s, &g, &tab, SolverOptions::default()).unwrap();
    // terminal exactness
    assert!(out.g.last().unwrap().iter().all(|v| *v == q));
    // stored gradient is the centred difference of the stored values
    let dx = g.dx();
    for (row, grad) in out.g.iter().zip(&out.grad) {
        for j in 1..row.len() - 1 {
            assert_eq!(grad[j], (row[j + 1] - row[j - 1]) / (2.0 * dx));
        }
    }
    // nonnegative data and sources keep the value above the claim's floor
    assert!(out.g.iter().flatten().all(|v| *v >= 0.0));
    assert!(out.newton_iterations.iter().all(|n| *n >= 1));
}

#[test]
fn incomplete_solver_refuses_complete_market() {
    let e = Config::complete_example().build().unwrap();
    let g = grid(10, 50);
    let tab = curve_table(&e.spec, &g);
    assert!(matches!(
        solve_semilinear_incomplete(&e.spec, &g, &tab, SolverOptions::default()),
        Err(Error::Mode(_))
    ));
}

#[test]
fn localized_solution_respects_lower_bound() {
    let e = Config::complete_example().build().unwrap();
    let s = e.with_notional(1.0);
    let n = 3;
    let g = GridSpec::localized(1.0, 40, n, 400).unwrap();
    let tab = curve_table(&s, &g);
    let out = solve_localized(&s, &g, n, &tab).unwrap();
    assert!(out.g.iter().flatten().all(|v| *v >= 0.0));
    assert!(out.g.iter().all(|row| row[0] == 0.0 && *row.last().unwrap() == 0.0));
    assert_eq!(out.mollifier, Some(n));
}

#[test]
fn localized_grid_must_match_domain() {
    let e = Config::complete_example().build().unwrap();
    let g = grid(10, 50);
    let tab = curve_table(&e.spec, &g);
    assert!(matches!(solve_localized(&e.spec, &g, 3, &tab), Err(Error::Domain(_))));
}

#[test]
fn claim_with_state_dependence_is_terminal_value() {
    let e = Config::complete_example().build().unwrap();
    let s = e.spec.with_payoff(ScalarField::from_fn(|_, x| 1.0 + x[0]));
    let g = grid(20, 100);
    let tab = curve_table(&s, &g);
    let out = solve_linear_complete(&s, &g, Some(&tab), SolverOptions::default()).unwrap();
    for (j, &x) in g.x_nodes.iter().enumerate() {
        assert_eq!(out.g[20][j], 1.0 + x);
    }
    let pol = extract_policies(&out, &s, Some(&tab)).unwrap();
    assert!(pol.max_decomposition_gap() < 1e-8);
}

proptest! {
    #[test]
    fn mollifier_bounded_and_monotone(n in 3usize..20, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let m = Mollifier::new(n).unwrap();
        let inner = 1.0 / (n as f64 - 1.0);
        let lo = 1.0 / n as f64;
        // increasing across the lower annulus
        let (u, v) = (lo + a.min(b) * (inner - lo), lo + a.max(b) * (inner - lo));
        prop_assert!(m.eval(u) <= m.eval(v));
        for x in [u, v, n as f64 - a] {
            prop_assert!((0.0..=1.0).contains(&m.eval(x)));
        }
        prop_assert_eq!(m.eval(0.5 * (inner + n as f64 - 1.0)), 1.0);
    }
}

//! Exit criteria of the library, one report line per criterion.

use cdsopt::affine_cir::ptilde_params;
use cdsopt::config::{implied_gamma, Config, Experiment};
use cdsopt::experiments::{
    hamiltonian_oracle, localization_gaps, run_complete_example, run_incomplete_example, run_oracle_suite, RunManifest,
    ORACLE_POINTS,
};
use cdsopt::hamiltonian::{HamiltonianInputs, MarketBlocks};
use cdsopt::hjb::interpolate;
use cdsopt::product_log::{pl, pl_derivative, pl_quad_bound_gap};
use cdsopt::Result;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::{Duration, Instant};

const SEED: u64 = 7;

struct Report {
    lines: Vec<(usize, &'static str, bool, String)>,
}

impl Report {
    fn record(&mut self, id: usize, name: &'static str, outcome: Result<(bool, String)>) {
        let (ok, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        println!("{} {id:>2} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        self.lines.push((id, name, ok, detail));
    }
}

fn check(m: &RunManifest, name: &str) -> (bool, String) {
    match m.check(name) {
        Some(c) => (c.passed, format!("{name} = {:.6e} (ref {:.6e}, tol {:.1e})", c.measured, c.reference, c.tolerance)),
        None => (false, format!("{name} missing from the {} manifest", m.run)),
    }
}

fn all(parts: Vec<(bool, String)>) -> (bool, String) {
    let ok = parts.iter().all(|p| p.0);
    (ok, parts.into_iter().map(|p| p.1).collect::<Vec<_>>().join("; "))
}

fn within(elapsed: Duration, limit: Duration) -> (bool, String) {
    (elapsed < limit, format!("runtime {:.2}s (limit {}s)", elapsed.as_secs_f64(), limit.as_secs()))
}

fn parameter_regressions() -> Result<(bool, String)> {
    let start = Instant::now();
    let c = Config::complete_example().build()?;
    let i = Config::incomplete_example().build()?;
    let pc = ptilde_params(&c.spec)?;
    let pi = ptilde_params(&i.spec)?;
    let gamma = implied_gamma(0.03, 0.06);
    let near = |name: &str, v: f64, r: f64| ((v - r).abs() <= 5e-5, format!("{name} {v:.7} vs {r}"));
    Ok(all(vec![
        near("kappa_tilde", pc.kappa, 0.6186),
        near("theta_tilde", pc.theta, 0.0242),
        near("incomplete kappa_tilde", pi.kappa, 0.0177),
        near("gamma", gamma, 0.5076),
        within(start.elapsed(), Duration::from_secs(1)),
    ]))
}

fn product_log_suite() -> Result<(bool, String)> {
    let start = Instant::now();
    let e = std::f64::consts::E;
    let at_e = (pl(e)? - 1.0).abs();
    let at_2e2 = (pl(2.0 * e * e)? - 2.0).abs();
    let mut round_trip: f64 = 0.0;
    let mut deriv: f64 = 0.0;
    for k in 0..=10_000 {
        let z = 10f64.powf(-8.0 + 16.0 * k as f64 / 10_000.0);
        let w = pl(z)?;
        round_trip = round_trip.max((w * w.exp() - z).abs() / z);
        let h = 1e-5 * z;
        let fd = (pl(z + h)? - pl(z - h)?) / (2.0 * h);
        deriv = deriv.max((fd - pl_derivative(z)?).abs() / pl_derivative(z)?.max(1.0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut gap = f64::INFINITY;
    let mut at_equality: f64 = 0.0;
    for _ in 0..10_000 {
        let k = 10f64.powf(rng.random_range(-3.0..1.0));
        let z = rng.random_range(-10.0..10.0);
        gap = gap.min(pl_quad_bound_gap(k, z)?);
        at_equality = at_equality.max(pl_quad_bound_gap(k, k)?.abs());
    }
    Ok(all(vec![
        (at_e <= 1e-12 && at_2e2 <= 1e-12, format!("|PL(e)-1| {at_e:.1e}, |PL(2e^2)-2| {at_2e2:.1e}")),
        (round_trip <= 1e-12, format!("round trip {round_trip:.1e}")),
        (deriv <= 1e-6, format!("derivative vs differences {deriv:.1e}")),
        (gap >= -1e-12 && at_equality <= 1e-12, format!("quadratic bound min gap {gap:.2e}, gap at K=z {at_equality:.1e}")),
        within(start.elapsed(), Duration::from_secs(5)),
    ]))
}

/// Brute-force comparison with `sigma_r = 0` at random points.
fn zero_sigma_oracle(e: &Experiment, seed: u64) -> Result<(f64, f64, f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = &e.spec;
    let (mut gap, mut foc, mut r_h, mut r_delta) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..ORACLE_POINTS {
        let t = rng.random_range(0.0..spec.horizon);
        let x = rng.random_range(0.01..0.15);
        let g = rng.random_range(0.0..2.0);
        let p = rng.random_range(-2.0..2.0);
        let xs = [x];
        let point = spec.eval(t, &xs);
        let psi = spec.psi(t, &xs);
        let sr = DVector::zeros(1);
        let h = HamiltonianInputs::new(&point, &sr, psi, spec.alpha, t, &xs)?;
        let r = h.reduced_incomplete(g, &[p])?;
        let cov = spec.eval_covariances(t, &xs, &sr)?;
        let brute = MarketBlocks::with_cds(&point, &cov, &sr, psi, spec.alpha).brute_force_policy(g, &DVector::from_element(1, p), true)?;
        gap = gap.max((r.delta - brute.delta).abs()).max((&r.theta - &brute.theta).amax());
        foc = foc.max(r.foc_residual.abs());
        r_h = r_h.max(r.r_h.abs());
        r_delta = r_delta.max(r.r_delta.abs());
    }
    Ok((gap, foc, r_h, r_delta))
}

fn hamiltonian_optimality(complete: &Experiment, incomplete: &Experiment) -> Result<(bool, String)> {
    let start = Instant::now();
    let mut parts = Vec::new();
    for (label, e) in [("complete", complete), ("incomplete", incomplete)] {
        let (_, table) = e.curve()?;
        let g = hamiltonian_oracle(e, &table, true, ORACLE_POINTS, SEED)?;
        let ok = g.theta <= 1e-5 && g.delta <= 1e-5 && g.foc < 1e-9;
        parts.push((ok, format!("{label}: theta gap {:.1e}, delta gap {:.1e}, foc {:.1e}", g.theta, g.delta, g.foc)));
    }
    let (gap, foc, _, _) = zero_sigma_oracle(incomplete, SEED)?;
    parts.push((gap <= 1e-5 && foc < 1e-9, format!("sigma_r = 0: gap {gap:.1e}, foc {foc:.1e}")));
    parts.push(within(start.elapsed(), Duration::from_secs(30)));
    Ok(all(parts))
}

fn residual_vanishing(complete: &Experiment, incomplete: &Experiment) -> Result<(bool, String)> {
    let (_, _, r_h, r_delta) = zero_sigma_oracle(incomplete, SEED + 1)?;
    let (_, table) = complete.curve()?;
    let spec = &complete.spec;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut diff: f64 = 0.0;
    for _ in 0..ORACLE_POINTS {
        let t = rng.random_range(0.0..spec.horizon);
        let x = rng.random_range(0.01..0.15);
        let g = rng.random_range(0.0..2.0);
        let p = rng.random_range(-2.0..2.0);
        let xs = [x];
        let sr = DVector::from_element(1, interpolate(&table.s_nodes, &table.y_nodes, &table.sigma_r, t, x));
        let h = HamiltonianInputs::new(&spec.eval(t, &xs), &sr, spec.psi(t, &xs), spec.alpha, t, &xs)?;
        let c = h.reduced_complete(g, &[p], t, &xs)?;
        let i = h.reduced_incomplete(g, &[p])?;
        diff = diff.max((c.value - i.value).abs());
    }
    Ok(all(vec![
        (r_h == 0.0 && r_delta == 0.0, format!("R_H(0) {r_h:e}, R_delta(0) {r_delta:e}")),
        (diff < 1e-9, format!("incomplete vs complete Hamiltonian on complete data {diff:.1e}")),
    ]))
}

fn localization() -> Result<(bool, String)> {
    let e = Config::complete_example().build()?;
    let gaps = localization_gaps(&e, 1.0, &[3, 4, 5], 50, 0.004)?;
    let decreasing = gaps.windows(2).all(|w| w[1] < w[0]);
    let last = *gaps.last().expect("three levels");
    Ok(all(vec![
        (decreasing, format!("gaps for n = 3, 4, 5: {gaps:.4?}")),
        (last < 1e-4, format!("final gap {last:.4e}")),
    ]))
}

#[test]
fn acceptance_criteria() {
    let mut report = Report { lines: Vec::new() };
    let complete = Config::complete_example();
    let incomplete = Config::incomplete_example();
    let (ce, ie) = (complete.build().unwrap(), incomplete.build().unwrap());
    let dir = tempfile::tempdir().unwrap();

    report.record(1, "parameter regressions", parameter_regressions());
    report.record(2, "product log", product_log_suite());
    report.record(3, "Hamiltonian optimality", hamiltonian_optimality(&ce, &ie));
    report.record(4, "residual vanishing", residual_vanishing(&ce, &ie));

    let start = Instant::now();
    let cm = run_complete_example(&complete, &dir.path().join("complete"));
    let im = run_incomplete_example(&incomplete, &dir.path().join("incomplete"));
    let figures = start.elapsed();
    let oracle_start = Instant::now();
    let om = run_oracle_suite(&complete, &dir.path().join("oracle"));
    let oracle_time = oracle_start.elapsed();
    let runs = match (&cm, &im, &om) {
        (Ok(c), Ok(i), Ok(o)) => Ok((c, i, o)),
        (Err(e), _, _) | (_, Err(e), _) | (_, _, Err(e)) => Err(e.clone()),
    };
    let from_runs = |f: &dyn Fn(&RunManifest, &RunManifest, &RunManifest) -> (bool, String)| runs.clone().map(|(c, i, o)| f(c, i, o));

    report.record(5, "decomposition identity", from_runs(&|c, i, _| all(vec![check(c, "decomposition_identity"), check(i, "decomposition_identity")])));
    report.record(6, "PDE vs Monte Carlo", from_runs(&|_, _, o| all(vec![check(o, "pde_vs_monte_carlo"), within(oracle_time, Duration::from_secs(120))])));
    report.record(7, "indifference price closed form", from_runs(&|c, _, _| {
        all(vec![check(c, "price_closed_form_q1"), check(c, "price_closed_form_q5"), check(c, "price_notional_independence")])
    }));
    report.record(8, "sigma_r bracketing", from_runs(&|c, _, _| check(c, "sigma_r_bracketing_slack")));
    report.record(9, "CDS curve PDE residuals", from_runs(&|c, i, _| {
        all(vec![
            check(c, "protection_leg_pde_residual"),
            check(c, "annuity_leg_pde_residual"),
            check(i, "protection_leg_pde_residual"),
            check(i, "annuity_leg_pde_residual"),
        ])
    }));
    report.record(10, "localization convergence", localization());
    report.record(11, "figure properties", from_runs(&|c, i, _| {
        all(vec![
            check(c, "equity_with_cds_not_short"),
            check(c, "cds_position_relative_range"),
            check(c, "relative_benefit_nonnegative"),
            check(c, "relative_benefit_increasing_in_q"),
            check(i, "price_spread_across_notionals"),
            within(figures, Duration::from_secs(600)),
        ])
    }));
    report.record(12, "dual density and utility dominance", from_runs(&|_, _, o| {
        all(vec![check(o, "dual_density_mean"), check(o, "perturbed_policy_dominated")])
    }));

    let failed: Vec<String> = report.lines.iter().filter(|l| !l.2).map(|l| format!("{} {}", l.0, l.1)).collect();
    println!("{} of {} criteria passed", report.lines.len() - failed.len(), report.lines.len());
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}

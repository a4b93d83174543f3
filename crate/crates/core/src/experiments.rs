//! Batch drivers for the worked examples and the oracle suite.
//!
//! Every run writes long-format CSVs (`t,x,q,series,value`) and a TOML
//! manifest listing the config hash, solver settings, seeds, emitted files
//! and the outcome of every check with its tolerance.

use crate::affine_cir::{ptilde_params, AffineTransform};
use crate::cds_curve::{CdsCurve, CurveTable};
use crate::config::{cfg_err, implied_gamma, Config, Experiment, ModeName};
use crate::error::{Error, Result};
use crate::hamiltonian::{HamiltonianInputs, MarketBlocks};
use crate::hjb::{
    extract_policies, interpolate, sigma_table, solve_localized, solve_nocds_benchmark, PolicySurface, SolverOptions,
    ValueSurface,
};
use crate::model::{GridSpec, MarketMode};
use crate::monte_carlo::{
    feynman_kac_g, measure_consistency, policy_check, pricing_survival, write_estimates_csv, EstimateRow, Measure,
    SimConfig,
};
use crate::pricing::{solve_with_cds, PriceSurface};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::Path;

/// Sample points of the Hamiltonian oracle.
pub const ORACLE_POINTS: usize = 50;
/// Equity shift of the perturbed policy in the utility-dominance check.
pub const POLICY_BUMP: f64 = 0.5;

/// How a measured value is compared with its reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    /// `|measured - reference| <= tolerance`
    Near,
    /// `measured <= reference + tolerance`
    AtMost,
    /// `measured >= reference - tolerance`
    AtLeast,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub rule: Rule,
    pub measured: f64,
    pub reference: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    pub fn new(name: &str, rule: Rule, measured: f64, reference: f64, tolerance: f64) -> Self {
        let passed = match rule {
            Rule::Near => (measured - reference).abs() <= tolerance,
            Rule::AtMost => measured <= reference + tolerance,
            Rule::AtLeast => measured >= reference - tolerance,
        };
        Self {
            name: name.to_string(),
            rule,
            measured,
            reference,
            tolerance,
            passed,
        }
    }

    pub fn near(name: &str, measured: f64, reference: f64, tolerance: f64) -> Self {
        Self::new(name, Rule::Near, measured, reference, tolerance)
    }

    /// `measured <= bound`
    pub fn at_most(name: &str, measured: f64, bound: f64) -> Self {
        Self::new(name, Rule::AtMost, measured, 0.0, bound)
    }

    /// `measured >= -slack`
    pub fn at_least(name: &str, measured: f64, slack: f64) -> Self {
        Self::new(name, Rule::AtLeast, measured, 0.0, slack)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutputFile {
    pub file: String,
    /// figure the table feeds, if any
    #[serde(skip_serializing_if = "Option::is_none")]
    pub figure: Option<String>,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Settings {
    pub nt: usize,
    pub nx: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub plot_x_min: f64,
    pub plot_x_max: f64,
    pub notionals: Vec<f64>,
    pub solver: SolverOptions,
    pub mc_paths: usize,
    pub mc_dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub run: String,
    /// SHA-256 of the canonical TOML form of the config
    pub config_hash: String,
    pub settings: Settings,
    pub seeds: Vec<u64>,
    pub outputs: Vec<OutputFile>,
    pub checks: Vec<Check>,
}

pub const MANIFEST_FILE: &str = "manifest.toml";

pub fn config_hash(config: &Config) -> String {
    hex::encode(Sha256::digest(config.to_toml().as_bytes()))
}

impl RunManifest {
    pub fn new(run: &str, config: &Config, solver: SolverOptions) -> Self {
        let g = &config.grid;
        Self {
            run: run.to_string(),
            config_hash: config_hash(config),
            settings: Settings {
                nt: g.nt,
                nx: g.nx,
                x_min: g.x_min,
                x_max: g.x_max,
                plot_x_min: g.plot_x_min,
                plot_x_max: g.plot_x_max,
                notionals: config.experiment.notionals.clone(),
                solver,
                mc_paths: config.monte_carlo.paths,
                mc_dt: config.monte_carlo.dt,
            },
            seeds: Vec::new(),
            outputs: Vec::new(),
            checks: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serialises")
    }

    /// Writes `manifest.toml` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join(MANIFEST_FILE), self.to_toml())?;
        Ok(())
    }

    fn emit(&mut self, dir: &Path, file: &str, figure: Option<&str>, rows: &[LongRow]) -> Result<()> {
        write_long_csv(&dir.join(file), rows)?;
        self.outputs.push(OutputFile {
            file: file.to_string(),
            figure: figure.map(str::to_string),
            rows: rows.len(),
        });
        Ok(())
    }
}

/// One row of a long-format table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LongRow {
    pub t: f64,
    pub x: f64,
    pub q: f64,
    pub series: String,
    pub value: f64,
}

impl LongRow {
    fn new(t: f64, x: f64, q: f64, series: &str, value: f64) -> Self {
        Self {
            t,
            x,
            q,
            series: series.to_string(),
            value,
        }
    }
}

pub fn write_long_csv(path: &Path, rows: &[LongRow]) -> Result<()> {
    let err = |e: csv::Error| Error::Io(e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    if rows.is_empty() {
        w.write_record(["t", "x", "q", "series", "value"]).map_err(err)?;
    }
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush()?;
    Ok(())
}

fn require_mode(config: &Config, mode: ModeName) -> Result<()> {
    if config.model.mode != mode {
        return Err(cfg_err("model.mode", format!("this run needs mode {mode:?}, config has {:?}", config.model.mode)));
    }
    Ok(())
}

/// Checks against the reference values in the config's `regression` section.
pub fn regression_checks(e: &Experiment) -> Result<Vec<Check>> {
    let Some(r) = &e.config.regression else {
        return Ok(Vec::new());
    };
    let params = ptilde_params(&e.spec)?;
    let mut out = Vec::new();
    if let Some(k) = r.kappa_tilde {
        out.push(Check::near("kappa_tilde", params.kappa, k, r.tolerance));
    }
    if let Some(th) = r.theta_tilde {
        out.push(Check::near("theta_tilde", params.theta, th, r.tolerance));
    }
    if let (Some(g), Some(p)) = (r.gamma, r.gamma_default_probability) {
        out.push(Check::near("gamma_from_default_probability", implied_gamma(p, e.config.factor.theta), g, r.tolerance));
    }
    Ok(out)
}

/// Smallest slack of `D~ B~ <= sigma_r <= B~` over the table.
pub fn bracketing_slack(curve: &CdsCurve, table: &CurveTable) -> Result<f64> {
    let mut slack = f64::INFINITY;
    for (i, &s) in table.s_nodes.iter().enumerate() {
        for (j, &y) in table.y_nodes.iter().enumerate() {
            let (lo, hi) = curve.sigma_r_bounds(s, y)?;
            let v = table.sigma_r[i][j];
            slack = slack.min(v - lo).min(hi - v);
        }
    }
    Ok(slack)
}

fn curve_checks(e: &Experiment, table: &CurveTable) -> Result<Vec<Check>> {
    let params = ptilde_params(&e.spec)?;
    let span = e.spec.cds_maturity.max(e.spec.horizon);
    let curve = CdsCurve::build(&e.spec, AffineTransform::new(params, span)?)?;
    let res = table.pde_residuals(&params);
    Ok(vec![
        Check::at_least("sigma_r_bracketing_slack", bracketing_slack(&curve, table)?, 1e-10),
        Check::at_most("protection_leg_pde_residual", res.u, 1e-3),
        Check::at_most("annuity_leg_pde_residual", res.v, 1e-3),
    ])
}

/// Space nodes of the reported range paired with their coordinates.
fn plot_nodes(e: &Experiment) -> Vec<(usize, f64)> {
    e.plot_indices().into_iter().map(|j| (j, e.grid.x_nodes[j])).collect()
}

fn row_at_t0(e: &Experiment, q: f64, series: &str, values: &[f64]) -> Vec<LongRow> {
    let t0 = e.grid.t_nodes[0];
    plot_nodes(e)
        .into_iter()
        .map(|(j, x)| LongRow::new(t0, x, q, series, values[j]))
        .collect()
}

/// Largest `(max - min)/mean|.|` of a surface over the reported range,
/// taken row by row in time.
pub fn relative_range(e: &Experiment, table: &[Vec<f64>]) -> f64 {
    let cols = e.plot_indices();
    table
        .iter()
        .map(|row| {
            let vals: Vec<f64> = cols.iter().map(|&j| row[j]).collect();
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let level = vals.iter().map(|v| v.abs()).sum::<f64>() / vals.len() as f64;
            (hi - lo) / level
        })
        .fold(0.0, f64::max)
}

/// Largest spread across notionals at `t = 0` over the reported range.
fn spread_across_notionals(e: &Experiment, tables: &[&Vec<Vec<f64>>]) -> f64 {
    e.plot_indices()
        .into_iter()
        .map(|j| {
            let vals = tables.iter().map(|t| t[0][j]);
            let hi = vals.clone().fold(f64::NEG_INFINITY, f64::max);
            let lo = vals.fold(f64::INFINITY, f64::min);
            hi - lo
        })
        .fold(0.0, f64::max)
}

/// Complete market with a defaultable bond: positions with and without the
/// CDS, the range of the CDS position over time and the relative benefit.
pub fn run_complete_example(config: &Config, out: &Path) -> Result<RunManifest> {
    require_mode(config, ModeName::Complete)?;
    let e = config.build()?;
    std::fs::create_dir_all(out)?;
    let options = SolverOptions::default();
    let mut m = RunManifest::new("complete", config, options);
    m.checks.extend(regression_checks(&e)?);
    let (transform, table) = e.curve()?;
    m.checks.extend(curve_checks(&e, &table)?);
    let notionals = &config.experiment.notionals;
    if notionals.is_empty() {
        m.write(out)?;
        return Ok(m);
    }
    let surf = PriceSurface::build(&e.spec, &e.grid, &table, notionals, options, true)?;
    let specs: Vec<_> = notionals.iter().map(|&q| e.with_notional(q)).collect();
    let policies: Vec<(PolicySurface, PolicySurface)> = (0..notionals.len())
        .into_par_iter()
        .map(|n| {
            let with = extract_policies(&surf.ce_cds[n], &specs[n], Some(&table))?;
            let without = extract_policies(&surf.ce_nocds[n], &specs[n], None)?;
            Ok((with, without))
        })
        .collect::<Result<_>>()?;

    let (a_t, b_t) = transform.eval(e.spec.horizon)?;
    let (mut eq_rows, mut cds_rows, mut range_rows, mut rb_rows, mut price_rows) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let cols = e.plot_indices();
    for (n, &q) in notionals.iter().enumerate() {
        let (with, without) = &policies[n];
        eq_rows.extend(row_at_t0(&e, q, "with_cds", &with.theta[0][0]));
        eq_rows.extend(row_at_t0(&e, q, "without_cds", &without.theta[0][0]));
        cds_rows.extend(row_at_t0(&e, q, "delta", &with.delta[0]));
        rb_rows.extend(row_at_t0(&e, q, "relative_benefit", &surf.relative_benefit[n][0]));
        price_rows.extend(row_at_t0(&e, q, "indifference_price", &surf.price[n][0]));
        for (i, &t) in e.grid.t_nodes.iter().enumerate() {
            let row = &with.delta[i];
            let (jmin, jmax) = cols.iter().fold((cols[0], cols[0]), |(a, b), &j| {
                (if row[j] < row[a] { j } else { a }, if row[j] > row[b] { j } else { b })
            });
            range_rows.push(LongRow::new(t, e.grid.x_nodes[jmin], q, "delta_min", row[jmin]));
            range_rows.push(LongRow::new(t, e.grid.x_nodes[jmax], q, "delta_max", row[jmax]));
        }
    }
    let closed: Vec<f64> = e.grid.x_nodes.iter().map(|x| a_t * (-b_t * x).exp()).collect();
    price_rows.extend(row_at_t0(&e, f64::NAN, "closed_form", &closed));
    m.emit(out, "equity_positions.csv", Some("optimal defaultable equity positions"), &eq_rows)?;
    m.emit(out, "cds_positions.csv", Some("optimal CDS positions"), &cds_rows)?;
    m.emit(out, "cds_range.csv", Some("range of the CDS position over time"), &range_rows)?;
    m.emit(out, "relative_benefit.csv", Some("relative benefit"), &rb_rows)?;
    m.emit(out, "indifference_prices.csv", None, &price_rows)?;

    for (n, &q) in notionals.iter().enumerate() {
        if q == 1.0 || q == 5.0 {
            let gap = surf.price[n][0].iter().zip(&closed).map(|(p, c)| (p - c).abs()).fold(0.0, f64::max);
            m.checks.push(Check::at_most(&format!("price_closed_form_q{q}"), gap, 1e-3));
        }
    }
    if let (Some(a), Some(b)) = (notionals.iter().position(|&q| q == 1.0), notionals.iter().position(|&q| q == 5.0)) {
        let gap = surf.price[a].iter().flatten().zip(surf.price[b].iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        m.checks.push(Check::at_most("price_notional_independence", gap, 1e-3));
    }
    let decomposition = policies.iter().map(|p| p.0.max_decomposition_gap()).fold(0.0, f64::max);
    m.checks.push(Check::at_most("decomposition_identity", decomposition, 1e-8));
    let min_theta = policies
        .iter()
        .flat_map(|p| p.0.theta[0].iter().flat_map(|row| cols.iter().map(move |&j| row[j])))
        .fold(f64::INFINITY, f64::min);
    m.checks.push(Check::at_least("equity_with_cds_not_short", min_theta, 0.0));
    let range = policies.iter().map(|p| relative_range(&e, &p.0.delta)).fold(0.0, f64::max);
    m.checks.push(Check::at_most("cds_position_relative_range", range, 0.10));
    let min_rb = surf.relative_benefit.iter().flatten().flatten().copied().filter(|v| !v.is_nan()).fold(f64::INFINITY, f64::min);
    m.checks.push(Check::at_least("relative_benefit_nonnegative", min_rb, 1e-6));
    if notionals.len() > 1 {
        let edge = *cols.last().expect("reported range is not empty");
        let mut order: Vec<usize> = (0..notionals.len()).collect();
        order.sort_by(|a, b| notionals[*a].total_cmp(&notionals[*b]));
        let step = order
            .windows(2)
            .map(|w| surf.relative_benefit[w[1]][0][edge] - surf.relative_benefit[w[0]][0][edge])
            .fold(f64::INFINITY, f64::min);
        m.checks.push(Check::new("relative_benefit_increasing_in_q", Rule::AtLeast, step, 0.0, 0.0));
    }
    m.write(out)?;
    Ok(m)
}

/// Incomplete market, two equities with the second defaultable: prices
/// and the three positions for every notional.
pub fn run_incomplete_example(config: &Config, out: &Path) -> Result<RunManifest> {
    require_mode(config, ModeName::Incomplete)?;
    let e = config.build()?;
    std::fs::create_dir_all(out)?;
    let options = SolverOptions::default();
    let mut m = RunManifest::new("incomplete", config, options);
    m.checks.extend(regression_checks(&e)?);
    m.checks.push(Check::at_most("rho_norm_squared_below_one", e.market.rho.norm_squared(), 1.0 - f64::EPSILON));
    if let Some(psi) = &e.psi {
        m.checks.push(Check::at_most("post_default_ansatz_residual", psi.ansatz_residual(), 1e-8));
    }
    let (_, table) = e.curve()?;
    m.checks.extend(curve_checks(&e, &table)?);
    let notionals = &config.experiment.notionals;
    if notionals.is_empty() {
        m.write(out)?;
        return Ok(m);
    }
    if e.market.k() < 2 {
        return Err(cfg_err("equity.nu", "the incomplete example needs two equities"));
    }
    let surf = PriceSurface::build(&e.spec, &e.grid, &table, notionals, options, false)?;
    let policies: Vec<PolicySurface> = (0..notionals.len())
        .into_par_iter()
        .map(|n| extract_policies(&surf.ce_cds[n], &e.with_notional(notionals[n]), Some(&table)))
        .collect::<Result<_>>()?;
    let (mut price_rows, mut nd_rows, mut d_rows, mut cds_rows) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (n, &q) in notionals.iter().enumerate() {
        let p = &policies[n];
        price_rows.extend(row_at_t0(&e, q, "indifference_price", &surf.price[n][0]));
        nd_rows.extend(row_at_t0(&e, q, "theta_nondefaultable", &p.theta[0][0]));
        d_rows.extend(row_at_t0(&e, q, "theta_defaultable", &p.theta[1][0]));
        cds_rows.extend(row_at_t0(&e, q, "delta", &p.delta[0]));
    }
    m.emit(out, "indifference_prices.csv", Some("utility indifference prices"), &price_rows)?;
    m.emit(out, "nondefaultable_equity.csv", Some("optimal non-defaultable equity positions"), &nd_rows)?;
    m.emit(out, "defaultable_equity.csv", Some("optimal defaultable equity positions"), &d_rows)?;
    m.emit(out, "cds_positions.csv", Some("optimal CDS positions"), &cds_rows)?;

    let decomposition = policies.iter().map(|p| p.max_decomposition_gap()).fold(0.0, f64::max);
    m.checks.push(Check::at_most("decomposition_identity", decomposition, 1e-8));
    if notionals.len() > 1 {
        m.checks.push(Check::at_most("price_spread_across_notionals", surf.cross_notional_spread(0, &e.plot_indices()), 0.05));
        let theta_d: Vec<&Vec<Vec<f64>>> = policies.iter().map(|p| &p.theta[1]).collect();
        let delta: Vec<&Vec<Vec<f64>>> = policies.iter().map(|p| &p.delta).collect();
        let ratio = spread_across_notionals(&e, &theta_d) / spread_across_notionals(&e, &delta);
        m.checks.push(Check::at_most("defaultable_equity_vs_cds_spread", ratio, 0.5));
    }
    m.write(out)?;
    Ok(m)
}

/// Equity-only benchmark certainty equivalents and positions.
pub fn run_nocds(config: &Config, out: &Path) -> Result<RunManifest> {
    let e = config.build()?;
    std::fs::create_dir_all(out)?;
    let options = SolverOptions::default();
    let mut m = RunManifest::new("nocds", config, options);
    let mut notionals = vec![0.0];
    notionals.extend(config.experiment.notionals.iter().copied().filter(|q| *q != 0.0));
    let runs: Vec<_> = notionals
        .par_iter()
        .map(|&q| {
            let spec = e.with_notional(q);
            let s = solve_nocds_benchmark(&spec, &e.grid, options)?;
            let p = extract_policies(&s, &spec, None)?;
            Ok((s, p))
        })
        .collect::<Result<_>>()?;
    let (mut ce_rows, mut pos_rows) = (Vec::new(), Vec::new());
    for (&q, (s, p)) in notionals.iter().zip(&runs) {
        ce_rows.extend(row_at_t0(&e, q, "certainty_equivalent", &s.g[0]));
        for (a, th) in p.theta.iter().enumerate() {
            pos_rows.extend(row_at_t0(&e, q, &format!("theta_{a}"), &th[0]));
        }
    }
    m.emit(out, "nocds_certainty_equivalent.csv", None, &ce_rows)?;
    m.emit(out, "nocds_positions.csv", None, &pos_rows)?;
    m.write(out)?;
    Ok(m)
}

/// Worst disagreement between the closed-form policies and a brute-force
/// maximiser of the raw Hamiltonian.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OracleGaps {
    pub theta: f64,
    pub delta: f64,
    pub value: f64,
    pub foc: f64,
}

/// Compares closed-form and brute-force optima at `points` pseudo-random
/// `(t, x, g, p)` with `t` in `[0, T]`, `x` in the reported range,
/// `g` in `[0, 2]` and `p` in `[-2, 2]`. `with_cds = false` checks the
/// equity-only Hamiltonian.
pub fn hamiltonian_oracle(e: &Experiment, table: &CurveTable, with_cds: bool, points: usize, seed: u64) -> Result<OracleGaps> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = &e.spec;
    let cfg = &e.config.grid;
    let mut gaps = OracleGaps::default();
    for _ in 0..points {
        let t = rng.random_range(0.0..spec.horizon);
        let x = rng.random_range(cfg.plot_x_min..cfg.plot_x_max);
        let g = rng.random_range(0.0..2.0);
        let p = rng.random_range(-2.0..2.0);
        let xs = [x];
        let point = spec.eval(t, &xs);
        let psi = spec.psi(t, &xs);
        let sr = DVector::from_element(1, interpolate(&table.s_nodes, &table.y_nodes, &table.sigma_r, t, x));
        let cov = spec.eval_covariances(t, &xs, &sr)?;
        let pv = DVector::from_element(1, p);
        let h = HamiltonianInputs::new(&point, &sr, psi, spec.alpha, t, &xs)?;
        let (closed, blocks) = if with_cds {
            let r = match spec.mode {
                MarketMode::Complete => h.reduced_complete(g, &[p], t, &xs)?,
                MarketMode::Incomplete { .. } => h.reduced_incomplete(g, &[p])?,
            };
            (r, MarketBlocks::with_cds(&point, &cov, &sr, psi, spec.alpha))
        } else {
            (h.reduced_nocds(g, &[p]), MarketBlocks::equity_only(&point, &cov, psi, spec.alpha))
        };
        let brute = blocks.brute_force_policy(g, &pv, with_cds)?;
        gaps.theta = gaps.theta.max((&closed.theta - &brute.theta).amax());
        gaps.delta = gaps.delta.max((closed.delta - brute.delta).abs());
        gaps.value = gaps.value.max((closed.value - brute.value).abs());
        gaps.foc = gaps.foc.max(closed.foc_residual.abs());
    }
    Ok(gaps)
}

/// Cross-checks of the solvers against independent estimators: the
/// brute-force Hamiltonian, Feynman-Kac and survival Monte Carlo, the dual
/// density, utility dominance of the computed policy, the change of
/// measure and the CDS curve equations.
pub fn run_oracle_suite(config: &Config, out: &Path) -> Result<RunManifest> {
    let e = config.build()?;
    std::fs::create_dir_all(out)?;
    let options = SolverOptions::default();
    let mut m = RunManifest::new("oracle", config, options);
    let seed = config.monte_carlo.seed;
    m.seeds.push(seed);
    let (transform, table) = e.curve()?;
    m.checks.extend(curve_checks(&e, &table)?);

    let with = hamiltonian_oracle(&e, &table, true, ORACLE_POINTS, seed)?;
    let without = hamiltonian_oracle(&e, &table, false, ORACLE_POINTS, seed)?;
    m.checks.push(Check::at_most("hamiltonian_theta_vs_brute_force", with.theta.max(without.theta), 1e-5));
    m.checks.push(Check::at_most("hamiltonian_delta_vs_brute_force", with.delta, 1e-5));
    m.checks.push(Check::at_most("hamiltonian_foc_residual", with.foc, 1e-9));

    let q = config.experiment.notionals.first().copied().unwrap_or(1.0);
    let spec = e.with_notional(q);
    let (t0, x0) = (0.0, config.experiment.x0);
    let mc = SimConfig::new(config.monte_carlo.paths, config.monte_carlo.dt, seed);
    let mut rows = Vec::new();

    let surface = solve_with_cds(&spec, &e.grid, &table, options)?;
    let policies = extract_policies(&surface, &spec, Some(&table))?;
    m.checks.push(Check::at_most("decomposition_identity", policies.max_decomposition_gap(), 1e-8));
    let g_pde = surface.value(t0, x0);
    if spec.mode == MarketMode::Complete {
        let fk = feynman_kac_g(&spec, &mc, t0, x0)?;
        rows.push(EstimateRow::new("certainty_equivalent", t0, x0, &fk, seed));
        m.checks.push(Check::near("pde_vs_monte_carlo", fk.mean, g_pde, (3.0 * fk.stderr).max(1e-3)));
    }
    let surv = pricing_survival(&spec, &mc, t0, x0)?;
    rows.push(EstimateRow::new("pricing_survival", t0, x0, &surv, seed));
    m.checks.push(Check::near("survival_vs_transform", surv.mean, transform.survival(spec.horizon - t0, x0)?, 3.0 * surv.stderr));

    let physical = mc.under(Measure::Physical);
    let pc = policy_check(&spec, &surface, &policies, Some(&table), &physical, t0, x0, POLICY_BUMP)?;
    rows.push(EstimateRow::new("dual_density", t0, x0, &pc.density, seed));
    rows.push(EstimateRow::new("utility_gap", t0, x0, &pc.utility_gap, seed));
    m.checks.push(Check::near("dual_density_mean", pc.density.mean, 1.0, 3.0 * pc.density.stderr));
    m.checks.push(Check::new("perturbed_policy_dominated", Rule::AtLeast, pc.utility_gap.mean, 3.0 * pc.utility_gap.stderr, 0.0));

    let (direct, weighted) = measure_consistency(&spec, &mc, t0, x0, 1.0)?;
    rows.push(EstimateRow::new("pricing_functional_direct", t0, x0, &direct, seed));
    rows.push(EstimateRow::new("pricing_functional_reweighted", t0, x0, &weighted, seed));
    let se = direct.stderr.hypot(weighted.stderr);
    m.checks.push(Check::near("change_of_measure", weighted.mean, direct.mean, 3.0 * se));

    write_estimates_csv(&out.join("mc_estimates.csv"), &rows)?;
    m.outputs.push(OutputFile {
        file: "mc_estimates.csv".into(),
        figure: None,
        rows: rows.len(),
    });
    m.write(out)?;
    Ok(m)
}

/// Sup-distance between successive localised solutions: entry `k` is
/// `max |G^{n+1} - G^n|` over `[0, T] x [1/(n-1), n-1]` for
/// `n = levels[k]`, on grids of `nt` steps and space step near `dx`.
pub fn localization_gaps(e: &Experiment, q: f64, levels: &[usize], nt: usize, dx: f64) -> Result<Vec<f64>> {
    let spec = e.with_notional(q);
    let params = ptilde_params(&spec)?;
    let curve = CdsCurve::build(&spec, AffineTransform::new(params, spec.cds_maturity.max(spec.horizon))?)?;
    let mut all: Vec<usize> = levels.to_vec();
    all.extend(levels.iter().map(|n| n + 1));
    all.sort_unstable();
    all.dedup();
    let surfaces: Vec<(usize, ValueSurface)> = all
        .par_iter()
        .map(|&n| {
            let width = n as f64 - 1.0 / n as f64;
            let nx = (width / dx).ceil() as usize + 1;
            let grid = GridSpec::localized(spec.horizon, nt, n, nx)?;
            let table = sigma_table(&curve, &grid)?;
            Ok((n, solve_localized(&spec, &grid, n, &table)?))
        })
        .collect::<Result<_>>()?;
    let find = |n: usize| &surfaces.iter().find(|(m, _)| *m == n).expect("solved level").1;
    Ok(levels
        .iter()
        .map(|&n| {
            let (inner, outer) = (find(n), find(n + 1));
            let (lo, hi) = (1.0 / (n as f64 - 1.0), n as f64 - 1.0);
            let mut gap: f64 = 0.0;
            for (i, row) in inner.g.iter().enumerate() {
                for (j, &x) in inner.x_nodes.iter().enumerate() {
                    if x >= lo && x <= hi {
                        gap = gap.max((row[j] - outer.value_at_row(i, x)).abs());
                    }
                }
            }
            gap
        })
        .collect())
}

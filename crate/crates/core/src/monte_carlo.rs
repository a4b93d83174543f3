//! Path-simulation oracles for the PDE solvers.
//!
//! All estimators work with a single factor. Paths are generated in batches,
//! each batch drawing from its own ChaCha stream, and batch sums are reduced
//! in batch order so estimates do not depend on the worker count.

use crate::cds_curve::CurveTable;
use crate::error::{Error, Result};
use crate::hjb::{interpolate, PolicySurface, ValueSurface};
use crate::model::{complete_entropy_rate, psd_sqrt, AffineIntensity, CirMarket, MarketMode, ModelSpec, RiskPremia};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gamma, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use std::path::Path;

/// Antithetic pairs per random stream.
const BATCH_PAIRS: usize = 256;

/// Discretisation of the factor SDE.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// Euler with negative excursions clamped to zero inside the coefficients.
    EulerFullTruncation,
    /// Noncentral chi-square transitions; CIR factor functionals only.
    ExactCir,
}

/// Measure under which paths are generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Measure {
    Physical,
    Pricing,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    /// number of paths, rounded up to an even count
    pub paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub scheme: Scheme,
    pub measure: Measure,
}

impl SimConfig {
    pub fn new(paths: usize, dt: f64, seed: u64) -> Self {
        Self {
            paths,
            dt,
            seed,
            scheme: Scheme::EulerFullTruncation,
            measure: Measure::Pricing,
        }
    }

    pub fn under(self, measure: Measure) -> Self {
        Self { measure, ..self }
    }

    pub fn with_scheme(self, scheme: Scheme) -> Self {
        Self { scheme, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.paths < 1 || !(self.dt > 0.0) {
            return Err(Error::Domain(format!(
                "simulation needs paths >= 1 and dt > 0 (got {}, {})",
                self.paths, self.dt
            )));
        }
        Ok(())
    }

    fn pairs(&self) -> usize {
        self.paths.div_ceil(2)
    }

    fn batch_rng(&self, batch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(batch as u64);
        rng
    }
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub paths: usize,
}

impl McEstimate {
    /// `|mean - target| <= k stderr`
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.stderr
    }
}

/// Running sums of per-pair sample values.
#[derive(Debug, Clone, Copy, Default)]
struct Acc {
    mean: f64,
    /// sum of squared deviations from `mean`
    m2: f64,
    n: usize,
}

impl Acc {
    fn push(&mut self, v: f64) {
        self.n += 1;
        let d = v - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (v - self.mean);
    }

    /// Pairwise combination of two partial accumulators.
    fn merge(self, o: Acc) -> Acc {
        if o.n == 0 {
            return self;
        }
        if self.n == 0 {
            return o;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        let w = o.n as f64 / n as f64;
        Acc {
            mean: self.mean + d * w,
            m2: self.m2 + o.m2 + d * d * self.n as f64 * w,
            n,
        }
    }

    /// `pair_size` paths went into each sample.
    fn estimate(self, pair_size: usize) -> McEstimate {
        let n = self.n as f64;
        let var = if self.n > 1 { self.m2 / (n - 1.0) } else { 0.0 };
        McEstimate {
            mean: self.mean,
            stderr: (var / n).sqrt(),
            paths: self.n * pair_size,
        }
    }
}

/// Runs `per_pair` over all antithetic pairs and reduces in batch order.
/// `per_pair` returns one sample value per estimated quantity.
fn run_pairs<const Q: usize>(
    cfg: &SimConfig,
    per_pair: impl Fn(&mut ChaCha8Rng) -> Result<[f64; Q]> + Sync,
) -> Result<[McEstimate; Q]> {
    cfg.validate()?;
    let pairs = cfg.pairs();
    let batches = pairs.div_ceil(BATCH_PAIRS);
    let sums: Vec<[Acc; Q]> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = cfg.batch_rng(b);
            let mut acc = [Acc::default(); Q];
            let n = BATCH_PAIRS.min(pairs - b * BATCH_PAIRS);
            for _ in 0..n {
                let v = per_pair(&mut rng)?;
                for q in 0..Q {
                    acc[q].push(v[q]);
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let total = sums.into_iter().fold([Acc::default(); Q], |mut a, b| {
        for q in 0..Q {
            a[q] = a[q].merge(b[q]);
        }
        a
    });
    Ok(total.map(|a| a.estimate(2)))
}

/// Precomputed scalars of the CIR family.
#[derive(Debug, Clone)]
struct CirFast {
    kappa: f64,
    theta: f64,
    xi: f64,
    gamma: AffineIntensity,
    gamma_tilde: AffineIntensity,
    /// `sigma nu`
    m: Vec<f64>,
    sigma: DMatrix<f64>,
    nu2: f64,
    nu_sil: f64,
    sil2: f64,
    rho_nu: f64,
    rho_sil: f64,
    premia: RiskPremia,
}

impl CirFast {
    fn new(c: &CirMarket) -> Result<Self> {
        let inv = c
            .sigma
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Model("equity volatility matrix is singular".into()))?;
        let sil = inv * &c.loss;
        Ok(Self {
            kappa: c.factor.kappa,
            theta: c.factor.theta,
            xi: c.factor.xi,
            gamma: c.gamma,
            gamma_tilde: c.gamma_tilde,
            m: (&c.sigma * &c.nu).iter().copied().collect(),
            sigma: c.sigma.clone(),
            nu2: c.nu.norm_squared(),
            nu_sil: c.nu.dot(&sil),
            sil2: sil.norm_squared(),
            rho_nu: c.rho.dot(&c.nu),
            rho_sil: c.rho.dot(&sil),
            premia: c.risk_premia,
        })
    }

    fn nu_tilde(&self, y: f64) -> f64 {
        let sq = y.sqrt();
        match self.premia {
            RiskPremia::SqrtScaled(c) => c * sq,
            RiskPremia::Minimal if sq == 0.0 => 0.0,
            RiskPremia::Minimal => sq * self.rho_nu - self.gamma_tilde.eval(y) / sq * self.rho_sil,
        }
    }
}

/// Coefficients along a path at `y+ = max(y, 0)`, without allocation for
/// the CIR family.
#[derive(Debug, Clone)]
struct PathModel<'a> {
    spec: &'a ModelSpec,
    cir: Option<CirFast>,
    k: usize,
}

/// Local equity coefficients.
#[derive(Debug, Clone)]
struct Local {
    b: f64,
    a: f64,
    nu_tilde: f64,
    gamma: f64,
    gamma_tilde: f64,
    mu_e: Vec<f64>,
    /// row-major k x k
    sigma_e: Vec<f64>,
    loss: Vec<f64>,
}

impl<'a> PathModel<'a> {
    fn new(spec: &'a ModelSpec) -> Result<Self> {
        let (d, k) = spec.dims();
        if d != 1 {
            return Err(Error::Model(format!("Monte Carlo oracles need one factor, got {d}")));
        }
        let cir = spec.cir().map(CirFast::new).transpose()?;
        Ok(Self { spec, cir, k })
    }

    /// `(b, a, nu_tilde)`
    fn factor(&self, t: f64, y: f64) -> (f64, f64, f64) {
        let y = y.max(0.0);
        match &self.cir {
            Some(c) => (c.kappa * (c.theta - y), c.xi * y.sqrt(), c.nu_tilde(y)),
            None => self.spec.coefficients.factor_scalar(t, y),
        }
    }

    /// Drift and diffusion under `measure`.
    fn dynamics(&self, t: f64, y: f64, measure: Measure) -> (f64, f64) {
        let (b, a, nt) = self.factor(t, y);
        match measure {
            Measure::Physical => (b, a),
            Measure::Pricing => (b - a * nt, a),
        }
    }

    fn intensities(&self, t: f64, y: f64) -> (f64, f64) {
        let y = y.max(0.0);
        match &self.cir {
            Some(c) => (c.gamma.eval(y), c.gamma_tilde.eval(y)),
            None => self.spec.coefficients.intensities(t, &[y]),
        }
    }

    fn q_complete(&self, t: f64, y: f64) -> Result<f64> {
        let y = y.max(0.0);
        match &self.cir {
            Some(c) => {
                let (g, gt) = (c.gamma.eval(y), c.gamma_tilde.eval(y));
                Ok(complete_entropy_rate(y, c.nu2, c.nu_sil, c.sil2, g, gt))
            }
            None => self.spec.q_complete(t, &[y]),
        }
    }

    fn local(&self, t: f64, y: f64, out: &mut Local) {
        let y = y.max(0.0);
        match &self.cir {
            Some(c) => {
                let sq = y.sqrt();
                out.b = c.kappa * (c.theta - y);
                out.a = c.xi * sq;
                out.nu_tilde = c.nu_tilde(y);
                out.gamma = c.gamma.eval(y);
                out.gamma_tilde = c.gamma_tilde.eval(y);
                for i in 0..self.k {
                    out.mu_e[i] = y * c.m[i];
                    for j in 0..self.k {
                        out.sigma_e[i * self.k + j] = sq * c.sigma[(i, j)];
                    }
                }
            }
            None => {
                let p = self.spec.eval(t, &[y]);
                out.b = p.b[0];
                out.a = p.a[(0, 0)];
                out.nu_tilde = p.nu_tilde[0];
                out.gamma = p.gamma;
                out.gamma_tilde = p.gamma_tilde;
                for i in 0..self.k {
                    out.mu_e[i] = p.mu_e[i];
                    out.loss[i] = p.loss[i];
                    for j in 0..self.k {
                        out.sigma_e[i * self.k + j] = p.sigma_e[(i, j)];
                    }
                }
            }
        }
    }

    fn local_buffer(&self, t: f64, y: f64) -> Local {
        let p = self.spec.eval(t, &[y.max(0.0)]);
        let mut out = Local {
            b: 0.0,
            a: 0.0,
            nu_tilde: 0.0,
            gamma: 0.0,
            gamma_tilde: 0.0,
            mu_e: vec![0.0; self.k],
            sigma_e: vec![0.0; self.k * self.k],
            loss: p.loss.iter().copied().collect(),
        };
        self.local(t, y, &mut out);
        out
    }
}

/// Uniform time grid from `t` to the horizon.
fn time_grid(t: f64, horizon: f64, dt: f64) -> Result<(usize, f64)> {
    if !(t < horizon) {
        return Err(Error::Domain(format!("start time {t} must precede the horizon {horizon}")));
    }
    let n = ((horizon - t) / dt).ceil().max(1.0) as usize;
    Ok((n, (horizon - t) / n as f64))
}

/// One exact CIR transition over `h` with parameters `(kappa, theta, xi)`.
fn exact_cir_step(rng: &mut ChaCha8Rng, y: f64, h: f64, kappa: f64, theta: f64, xi: f64) -> Result<f64> {
    let e = (-kappa * h).exp();
    let c = xi * xi * (1.0 - e) / (4.0 * kappa);
    let df = 4.0 * kappa * theta / (xi * xi);
    let lambda = y.max(0.0) * e / c;
    let n = if lambda > 0.0 {
        Poisson::new(0.5 * lambda)
            .map_err(|err| Error::Numerical(format!("Poisson draw: {err}")))?
            .sample(rng)
    } else {
        0.0
    };
    let shape = 0.5 * df + n;
    let g: f64 = Gamma::new(shape, 2.0)
        .map_err(|err| Error::Numerical(format!("Gamma draw: {err}")))?
        .sample(rng);
    Ok(c * g)
}

/// Factor path generator for pure factor functionals.
struct FactorSampler<'a> {
    model: &'a PathModel<'a>,
    cfg: SimConfig,
    t: f64,
    x: f64,
    n: usize,
    h: f64,
    exact: Option<(f64, f64, f64)>,
}

impl<'a> FactorSampler<'a> {
    fn new(model: &'a PathModel<'a>, cfg: SimConfig, t: f64, x: f64) -> Result<Self> {
        let (n, h) = time_grid(t, model.spec.horizon, cfg.dt)?;
        let exact = match cfg.scheme {
            Scheme::EulerFullTruncation => None,
            Scheme::ExactCir => {
                let c = model
                    .spec
                    .cir()
                    .ok_or_else(|| Error::Mode("exact sampling needs the CIR family".into()))?;
                let f = c.factor;
                match cfg.measure {
                    Measure::Physical => Some((f.kappa, f.theta, f.xi)),
                    Measure::Pricing => {
                        let (kt, level) = c.ptilde_drift();
                        if !(kt > 0.0) {
                            return Err(Error::MeasureChange { kappa_tilde: kt });
                        }
                        Some((kt, level / kt, f.xi))
                    }
                }
            }
        };
        Ok(Self { model, cfg, t, x, n, h, exact })
    }

    /// Fills an antithetic pair of paths; exact transitions draw two
    /// independent paths instead.
    fn pair(&self, rng: &mut ChaCha8Rng, p: &mut [f64], q: &mut [f64]) -> Result<()> {
        p[0] = self.x;
        q[0] = self.x;
        let sq = self.h.sqrt();
        for i in 0..self.n {
            let s = self.t + i as f64 * self.h;
            match self.exact {
                Some((k, th, xi)) => {
                    p[i + 1] = exact_cir_step(rng, p[i], self.h, k, th, xi)?;
                    q[i + 1] = exact_cir_step(rng, q[i], self.h, k, th, xi)?;
                }
                None => {
                    let z: f64 = rng.sample(StandardNormal);
                    let (b, a) = self.model.dynamics(s, p[i], self.cfg.measure);
                    p[i + 1] = p[i] + b * self.h + a * sq * z;
                    let (b, a) = self.model.dynamics(s, q[i], self.cfg.measure);
                    q[i + 1] = q[i] + b * self.h - a * sq * z;
                }
            }
        }
        Ok(())
    }

    fn time(&self, i: usize) -> f64 {
        self.t + i as f64 * self.h
    }
}

/// Factor paths on the uniform grid from `t` to the horizon. Materialises
/// every path; use [`factor_expectation`] for large ensembles.
pub fn simulate_factor(spec: &ModelSpec, cfg: &SimConfig, t: f64, x: f64) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    cfg.validate()?;
    let model = PathModel::new(spec)?;
    let sampler = FactorSampler::new(&model, *cfg, t, x)?;
    let times: Vec<f64> = (0..=sampler.n).map(|i| sampler.time(i)).collect();
    let pairs = cfg.pairs();
    let batches = pairs.div_ceil(BATCH_PAIRS);
    let chunks: Vec<Vec<Vec<f64>>> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = cfg.batch_rng(b);
            let n = BATCH_PAIRS.min(pairs - b * BATCH_PAIRS);
            let mut out = Vec::with_capacity(2 * n);
            for _ in 0..n {
                let mut p = vec![0.0; sampler.n + 1];
                let mut q = vec![0.0; sampler.n + 1];
                sampler.pair(&mut rng, &mut p, &mut q)?;
                out.push(p);
                out.push(q);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok((times, chunks.into_iter().flatten().collect()))
}

/// `E[f(times, path)]` over simulated factor paths.
pub fn factor_expectation(
    spec: &ModelSpec,
    cfg: &SimConfig,
    t: f64,
    x: f64,
    f: impl Fn(&[f64], &[f64]) -> f64 + Sync,
) -> Result<McEstimate> {
    let model = PathModel::new(spec)?;
    let sampler = FactorSampler::new(&model, *cfg, t, x)?;
    let times: Vec<f64> = (0..=sampler.n).map(|i| sampler.time(i)).collect();
    let [est] = run_pairs(cfg, |rng| {
        let mut p = vec![0.0; sampler.n + 1];
        let mut q = vec![0.0; sampler.n + 1];
        sampler.pair(rng, &mut p, &mut q)?;
        Ok([0.5 * (f(&times, &p) + f(&times, &q))])
    })?;
    Ok(est)
}

/// Default time from the trapezoidal cumulative hazard of `intensity` along
/// `path` against the standard exponential draw `e`; infinite if the hazard
/// never reaches `e`.
pub fn sample_default(times: &[f64], path: &[f64], intensity: impl Fn(f64, f64) -> f64, e: f64) -> f64 {
    let mut cum = 0.0;
    let mut prev = intensity(times[0], path[0]);
    for i in 1..times.len() {
        let cur = intensity(times[i], path[i]);
        let inc = 0.5 * (prev + cur) * (times[i] - times[i - 1]);
        if inc > 0.0 && cum + inc >= e {
            return times[i - 1] + (times[i] - times[i - 1]) * (e - cum) / inc;
        }
        cum += inc;
        prev = cur;
    }
    f64::INFINITY
}

/// Draws a standard exponential.
pub fn exponential_draw(rng: &mut impl Rng) -> f64 {
    rng.sample(Exp1)
}

/// Which intensity drives default along a path.
fn intensity_of<'a>(model: &'a PathModel<'a>, measure: Measure) -> impl Fn(f64, f64) -> f64 + 'a {
    move |s, y| {
        let (g, gt) = model.intensities(s, y);
        match measure {
            Measure::Physical => g,
            Measure::Pricing => gt,
        }
    }
}

/// Empirical `P(tau > s)` for each `s` in `checks`, under `cfg.measure`.
pub fn survival_curve(spec: &ModelSpec, cfg: &SimConfig, t: f64, x: f64, checks: &[f64]) -> Result<Vec<McEstimate>> {
    let model = PathModel::new(spec)?;
    let sampler = FactorSampler::new(&model, *cfg, t, x)?;
    let times: Vec<f64> = (0..=sampler.n).map(|i| sampler.time(i)).collect();
    let lambda = intensity_of(&model, cfg.measure);
    // one pass per checkpoint keeps run_pairs monomorphic; checkpoints are few
    checks
        .iter()
        .map(|&s| {
            let [est] = run_pairs(cfg, |rng| {
                let mut p = vec![0.0; sampler.n + 1];
                let mut q = vec![0.0; sampler.n + 1];
                sampler.pair(rng, &mut p, &mut q)?;
                let e = exponential_draw(rng);
                let alive = |path: &[f64]| (sample_default(&times, path, &lambda, e) > s) as u8 as f64;
                Ok([0.5 * (alive(&p) + alive(&q))])
            })?;
            Ok(est)
        })
        .collect()
}

/// Trapezoidal `(exp(-int gt), int exp(-int gt) source)` along a path.
fn discounted_integral(times: &[f64], path: &[f64], gt: impl Fn(f64, f64) -> f64, source: impl Fn(f64, f64) -> Result<f64>) -> Result<(f64, f64)> {
    let mut lam = 0.0;
    let mut g_prev = gt(times[0], path[0]);
    let mut f_prev = source(times[0], path[0])?;
    let mut integral = 0.0;
    for i in 1..times.len() {
        let h = times[i] - times[i - 1];
        let g = gt(times[i], path[i]);
        lam += 0.5 * (g_prev + g) * h;
        let f = (-lam).exp() * source(times[i], path[i])?;
        integral += 0.5 * (f_prev + f) * h;
        g_prev = g;
        f_prev = f;
    }
    Ok(((-lam).exp(), integral))
}

/// Monte Carlo value of the complete-market certainty equivalent,
/// `E~[exp(-int gt) phi(X_T) + int exp(-int gt)(Q_c/alpha + gt psi)]`.
pub fn feynman_kac_g(spec: &ModelSpec, cfg: &SimConfig, t: f64, x: f64) -> Result<McEstimate> {
    if spec.mode != MarketMode::Complete {
        return Err(Error::Mode("the Feynman-Kac representation needs the complete market".into()));
    }
    let cfg = cfg.under(Measure::Pricing);
    let model = PathModel::new(spec)?;
    let alpha = spec.alpha;
    let gt = |s: f64, y: f64| model.intensities(s, y).1;
    let source = |s: f64, y: f64| -> Result<f64> {
        let y = y.max(0.0);
        Ok(model.q_complete(s, y)? / alpha + gt(s, y) * spec.psi(s, &[y]))
    };
    let sampler = FactorSampler::new(&model, cfg, t, x)?;
    let times: Vec<f64> = (0..=sampler.n).map(|i| sampler.time(i)).collect();
    let [est] = run_pairs(&cfg, |rng| {
        let mut p = vec![0.0; sampler.n + 1];
        let mut q = vec![0.0; sampler.n + 1];
        sampler.pair(rng, &mut p, &mut q)?;
        let mut v = 0.0;
        for path in [&p, &q] {
            let (disc, int) = discounted_integral(&times, path, gt, source)?;
            v += 0.5 * (disc * spec.phi(&[path[sampler.n].max(0.0)]) + int);
        }
        Ok([v])
    })?;
    Ok(est)
}

/// `E~[exp(-int_t^T gt)]`: the complete-market indifference price per unit
/// notional, which equals `(G(q) - G(0))/q` path by path.
pub fn pricing_survival(spec: &ModelSpec, cfg: &SimConfig, t: f64, x: f64) -> Result<McEstimate> {
    let cfg = cfg.under(Measure::Pricing);
    let model = PathModel::new(spec)?;
    let gt = |s: f64, y: f64| model.intensities(s, y).1;
    factor_expectation(spec, &cfg, t, x, |times, path| {
        discounted_integral(times, path, gt, |_, _| Ok(0.0)).map_or(f64::NAN, |v| v.0)
    })
}

/// Result of simulating the optimal and a perturbed policy on common paths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyCheck {
    /// `E[Z_T]`; the dual density is a martingale when this is one.
    pub density: McEstimate,
    /// `E[Z_T(perturbed) - Z_T(optimal)]`, expected utility lost by the
    /// perturbation in units of `exp(-alpha G(t, x))`; positive when the
    /// candidate policy is better.
    pub utility_gap: McEstimate,
}

/// Simulates wealth under the physical measure with the policy surface and
/// with every equity position shifted by `bump`.
///
/// Wealth follows `theta'(mu_e ds + sigma_e dB) + delta((sigma_r a nu~ - gt) ds
/// + sigma_r a dW)` with `B = rho W + rho_bar Z`, jumps by `-theta' l + delta`
/// at default and is stopped there. The dual density is
/// `Z_T = exp(-alpha(W + 1{tau>T} phi(X_T) + 1{tau<=T} psi(tau, X_tau) - G(t, x)))`.
pub fn policy_check(
    spec: &ModelSpec,
    surface: &ValueSurface,
    policies: &PolicySurface,
    sigma: Option<&CurveTable>,
    cfg: &SimConfig,
    t: f64,
    x: f64,
    bump: f64,
) -> Result<PolicyCheck> {
    if cfg.scheme != Scheme::EulerFullTruncation {
        return Err(Error::Mode("wealth simulation uses the Euler scheme".into()));
    }
    if cfg.measure != Measure::Physical {
        return Err(Error::Mode("wealth is simulated under the physical measure".into()));
    }
    let model = PathModel::new(spec)?;
    let k = model.k;
    if policies.theta.len() != k {
        return Err(Error::Model(format!("policy surface has {} equities, market has {k}", policies.theta.len())));
    }
    let point = spec.eval(t, &[x]);
    let rho: Vec<f64> = point.rho.column(0).iter().copied().collect();
    let rho_bar = psd_sqrt(&(DMatrix::identity(k, k) - &point.rho * point.rho.transpose()))?;
    let alpha = spec.alpha;
    let g0 = surface.value(t, x);
    let (n, h) = time_grid(t, spec.horizon, cfg.dt)?;
    let sq = h.sqrt();
    let sigma_r = |s: f64, y: f64| match sigma {
        Some(tab) => interpolate(&tab.s_nodes, &tab.y_nodes, &tab.sigma_r, s, y),
        None => 0.0,
    };

    struct Path {
        y: f64,
        w: [f64; 2],
        hazard: f64,
        e: f64,
        done: Option<[f64; 2]>,
    }

    let [density, gap] = run_pairs(cfg, |rng| {
        let mut loc = model.local_buffer(t, x);
        let mut paths = [0, 1].map(|_| Path {
            y: x,
            w: [0.0; 2],
            hazard: 0.0,
            e: 0.0,
            done: None,
        });
        let e = exponential_draw(rng);
        paths[0].e = e;
        paths[1].e = e;
        let mut z = vec![0.0; k];
        let mut db = vec![0.0; k];
        let mut theta = vec![0.0; k];
        for i in 0..n {
            let s = t + i as f64 * h;
            let zf: f64 = rng.sample(StandardNormal);
            for v in z.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            for (side, path) in paths.iter_mut().enumerate() {
                if path.done.is_some() {
                    continue;
                }
                let sign = if side == 0 { 1.0 } else { -1.0 };
                let y = path.y.max(0.0);
                model.local(s, y, &mut loc);
                let dwf = sign * sq * zf;
                for a in 0..k {
                    let mut v = rho[a] * dwf;
                    for c in 0..k {
                        v += rho_bar[(a, c)] * sign * sq * z[c];
                    }
                    db[a] = v;
                }
                let delta = policies.delta_at(s, y);
                let sr = sigma_r(s, y);
                let cds = delta * ((sr * loc.a * loc.nu_tilde - loc.gamma_tilde) * h + sr * loc.a * dwf);
                for a in 0..k {
                    theta[a] = policies.theta_at(a, s, y);
                }
                let mut jumps = [delta; 2];
                for (m, shift) in [0.0, bump].into_iter().enumerate() {
                    let mut dw = cds;
                    let mut jm = delta;
                    for a in 0..k {
                        let th = theta[a] + shift;
                        let mut vol = 0.0;
                        for c in 0..k {
                            vol += loc.sigma_e[a * k + c] * db[c];
                        }
                        dw += th * (loc.mu_e[a] * h + vol);
                        jm -= th * loc.loss[a];
                    }
                    path.w[m] += dw;
                    jumps[m] = jm;
                }
                let y_next = path.y + loc.b * h + loc.a * dwf;
                let g_next = model.intensities(s + h, y_next).0;
                let inc = 0.5 * (loc.gamma + g_next) * h;
                if inc > 0.0 && path.hazard + inc >= path.e {
                    let tau = s + h * (path.e - path.hazard) / inc;
                    let psi = spec.psi(tau, &[y_next.max(0.0)]);
                    path.done = Some([path.w[0] + jumps[0] + psi, path.w[1] + jumps[1] + psi]);
                }
                path.hazard += inc;
                path.y = y_next;
            }
        }
        let mut zsum = 0.0;
        let mut gsum = 0.0;
        for path in &paths {
            let v = path.done.unwrap_or_else(|| {
                let phi = spec.phi(&[path.y.max(0.0)]);
                [path.w[0] + phi, path.w[1] + phi]
            });
            let z_opt = (-alpha * (v[0] - g0)).exp();
            let z_pert = (-alpha * (v[1] - g0)).exp();
            zsum += 0.5 * z_opt;
            gsum += 0.5 * (z_pert - z_opt);
        }
        Ok([zsum, gsum])
    })?;
    Ok(PolicyCheck {
        density,
        utility_gap: gap,
    })
}

/// The dual density mean `E[Z_T]` alone.
pub fn dual_density_check(
    spec: &ModelSpec,
    surface: &ValueSurface,
    policies: &PolicySurface,
    sigma: Option<&CurveTable>,
    cfg: &SimConfig,
    t: f64,
    x: f64,
) -> Result<McEstimate> {
    Ok(policy_check(spec, surface, policies, sigma, cfg, t, x, 0.0)?.density)
}

/// A factor-and-default functional estimated twice: directly under the
/// pricing measure, and under the physical measure reweighted by the
/// density `exp(-int nu~ dW - 1/2 int nu~^2) (gt/g)^{1{tau<=T}} exp(-int (gt - g))`.
///
/// The functional is `1{tau>T} X_T + c 1{tau<=T}`.
pub fn measure_consistency(spec: &ModelSpec, cfg: &SimConfig, t: f64, x: f64, c: f64) -> Result<(McEstimate, McEstimate)> {
    let model = PathModel::new(spec)?;
    let pricing = cfg.under(Measure::Pricing);
    let sampler = FactorSampler::new(&model, pricing, t, x)?;
    let times: Vec<f64> = (0..=sampler.n).map(|i| sampler.time(i)).collect();
    let gt = |s: f64, y: f64| model.intensities(s, y).1;
    let [direct] = run_pairs(&pricing, |rng| {
        let mut p = vec![0.0; sampler.n + 1];
        let mut q = vec![0.0; sampler.n + 1];
        sampler.pair(rng, &mut p, &mut q)?;
        let mut v = 0.0;
        for path in [&p, &q] {
            let (disc, _) = discounted_integral(&times, path, gt, |_, _| Ok(0.0))?;
            v += 0.5 * (disc * path[sampler.n].max(0.0) + c * (1.0 - disc));
        }
        Ok([v])
    })?;
    let physical = cfg.under(Measure::Physical).with_scheme(Scheme::EulerFullTruncation);
    let (n, h) = (sampler.n, sampler.h);
    let sq = h.sqrt();
    let [weighted] = run_pairs(&physical, |rng| {
        let e = exponential_draw(rng);
        let mut out = 0.0;
        let zs: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for sign in [1.0, -1.0] {
            let mut y = x;
            let mut log_l = 0.0;
            let mut hazard = 0.0;
            let mut value = None;
            for (i, z) in zs.iter().enumerate() {
                let s = t + i as f64 * h;
                let (b, a, nt) = model.factor(s, y);
                let (g, gtl) = model.intensities(s, y);
                let dw = sign * sq * z;
                let y_next = y + b * h + a * dw;
                let (g2, gt2) = model.intensities(s + h, y_next);
                log_l += -nt * dw - 0.5 * nt * nt * h;
                let inc = 0.5 * (g + g2) * h;
                if inc > 0.0 && hazard + inc >= e {
                    let w = (e - hazard) / inc;
                    log_l -= w * 0.5 * ((gtl - g) + (gt2 - g2)) * h;
                    let (gs, gts) = (g + w * (g2 - g), gtl + w * (gt2 - gtl));
                    log_l += (gts / gs).ln();
                    value = Some(c * log_l.exp());
                    break;
                }
                hazard += inc;
                log_l -= 0.5 * ((gtl - g) + (gt2 - g2)) * h;
                y = y_next;
            }
            out += 0.5 * value.unwrap_or_else(|| y.max(0.0) * log_l.exp());
        }
        Ok([out])
    })?;
    Ok((direct, weighted))
}

/// One CSV row of an estimate.
#[derive(Debug, Clone, Serialize)]
pub struct EstimateRow {
    pub quantity: String,
    pub t: f64,
    pub x: f64,
    pub mean: f64,
    pub stderr: f64,
    pub npaths: usize,
    pub seed: u64,
}

impl EstimateRow {
    pub fn new(quantity: &str, t: f64, x: f64, est: &McEstimate, seed: u64) -> Self {
        Self {
            quantity: quantity.to_string(),
            t,
            x,
            mean: est.mean,
            stderr: est.stderr,
            npaths: est.paths,
            seed,
        }
    }
}

pub fn write_estimates_csv(path: &Path, rows: &[EstimateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn acc_standard_error() {
        let mut a = Acc::default();
        for v in [1.0, 2.0, 3.0, 4.0] {
            a.push(v);
        }
        let e = a.estimate(2);
        assert_eq!(e.mean, 2.5);
        assert!((e.stderr - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
        assert_eq!(e.paths, 8);
    }

    #[test]
    fn acc_merge_matches_single_pass() {
        let vals: Vec<f64> = (0..37).map(|i| 1e6 + (i as f64 * 0.37).sin()).collect();
        let mut whole = Acc::default();
        vals.iter().for_each(|v| whole.push(*v));
        let (mut a, mut b) = (Acc::default(), Acc::default());
        vals[..13].iter().for_each(|v| a.push(*v));
        vals[13..].iter().for_each(|v| b.push(*v));
        let (x, y) = (whole.estimate(1), a.merge(b).estimate(1));
        assert!((x.mean - y.mean).abs() < 1e-9);
        assert!((x.stderr - y.stderr).abs() < 1e-12 * x.stderr.max(1.0));
        let mut c = Acc::default();
        (0..100).for_each(|_| c.push(1.7));
        assert_eq!(c.estimate(1).stderr, 0.0);
    }

    #[test]
    fn default_never_with_zero_intensity() {
        let times = [0.0, 0.5, 1.0];
        let path = [0.1, 0.1, 0.1];
        assert_eq!(sample_default(&times, &path, |_, _| 0.0, 0.01), f64::INFINITY);
    }

    #[test]
    fn default_time_interpolated() {
        let times = [0.0, 1.0, 2.0];
        let path = [0.0; 3];
        // constant intensity 1: tau = e
        assert!((sample_default(&times, &path, |_, _| 1.0, 1.5) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn invalid_config() {
        assert!(SimConfig::new(0, 1e-3, 1).validate().is_err());
        assert!(SimConfig::new(10, 0.0, 1).validate().is_err());
    }
}

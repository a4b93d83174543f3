//! Finite-difference solvers for the single-factor certainty-equivalent
//! PDEs, written backward from `T` as
//!
//! ```text
//! 0 = G_t + (A/2) G_xx + beta G_x + F(t, x, G, G_x),   G(T, .) = phi
//! ```
//!
//! * linear complete market: `beta = b - a nu~`, `F = gt (psi - G) + Q_c / alpha`;
//! * Hamiltonian form: `beta = b`,
//!   `F = -(alpha/2) A G_x^2 + chi (gamma/alpha + H(G, G_x))` with `H` the
//!   complete, incomplete or equity-only reduced Hamiltonian and `chi` an
//!   optional mollifier.
//!
//! Time stepping is a theta-scheme (Crank-Nicolson by default) with a
//! Newton iteration on a tridiagonal Jacobian; the nonlinear source is
//! differentiated by forward differences.

use crate::cds_curve::{CdsCurve, CurveTable};
use crate::error::{Error, Result};
use crate::hamiltonian::{decomposition_gap, HamiltonianInputs};
use crate::model::{GridSpec, MarketMode, ModelSpec};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;
use std::path::Path;

pub const NEWTON_TOL: f64 = 1e-10;
pub const NEWTON_MAX_ITER: usize = 30;
pub const MAX_HALVINGS: usize = 6;
/// Cell Peclet number above which the drift is upwinded.
pub const PECLET_LIMIT: f64 = 2.0;
/// Relative step of the forward-difference Jacobian.
pub const FD_STEP: f64 = 1e-7;
/// Most time rows of the tabulated `sigma_r`.
pub const SIGMA_ROWS: usize = 200;

/// Smooth cutoff equal to one on `O_{n-1}` and zero outside `O_n`, with
/// `O_n = (1/n, n)` and a quintic smoothstep across each annulus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mollifier {
    pub n: usize,
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)
}

impl Mollifier {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Domain(format!("mollifier level must be >= 2, got {n}")));
        }
        Ok(Self { n })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.n as f64;
        let (lo, hi) = (1.0 / n, n);
        let (ilo, ihi) = (1.0 / (n - 1.0), n - 1.0);
        if x <= lo || x >= hi {
            0.0
        } else if x < ilo {
            smoothstep((x - lo) / (ilo - lo))
        } else if x > ihi {
            smoothstep((hi - x) / (hi - ihi))
        } else {
            1.0
        }
    }
}

/// Treatment of the two ends of the space grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Boundary {
    /// `G_xx = 0` with a one-sided inward gradient
    Extrapolation,
    /// `G = 0`
    ZeroDirichlet,
}

/// Reduced Hamiltonian used by the Hamiltonian form of the PDE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum HamiltonianKind {
    Complete,
    Incomplete,
    EquityOnly,
}

/// Which equation a surface solves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Equation {
    LinearComplete,
    Hamiltonian(HamiltonianKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverOptions {
    /// implicit weight of the theta-scheme
    pub theta: f64,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub max_halvings: usize,
    pub boundary: Boundary,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            theta: 0.5,
            newton_tol: NEWTON_TOL,
            newton_max_iter: NEWTON_MAX_ITER,
            max_halvings: MAX_HALVINGS,
            boundary: Boundary::Extrapolation,
        }
    }
}

/// Solution `G(t_i, x_j)` with its gradient and solver diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueSurface {
    pub equation: Equation,
    pub options: SolverOptions,
    pub mollifier: Option<usize>,
    pub t_nodes: Vec<f64>,
    pub x_nodes: Vec<f64>,
    /// `g[i][j] = G(t_i, x_j)`
    pub g: Vec<Vec<f64>>,
    /// centred differences of `g`, one-sided at the ends
    pub grad: Vec<Vec<f64>>,
    /// Newton iterations per backward step (summed over sub-steps)
    pub newton_iterations: Vec<usize>,
    /// most step halvings used by any step
    pub halvings: usize,
    /// largest interior PDE residual, measured with centred stencils of
    /// twice the grid spacing
    pub max_residual: f64,
}

fn gradient(row: &[f64], dx: f64) -> Vec<f64> {
    let n = row.len();
    (0..n)
        .map(|j| {
            if j == 0 {
                (row[1] - row[0]) / dx
            } else if j == n - 1 {
                (row[n - 1] - row[n - 2]) / dx
            } else {
                (row[j + 1] - row[j - 1]) / (2.0 * dx)
            }
        })
        .collect()
}

fn lerp_row(xs: &[f64], row: &[f64], x: f64) -> f64 {
    let n = xs.len();
    if x <= xs[0] {
        return row[0];
    }
    if x >= xs[n - 1] {
        return row[n - 1];
    }
    let j = xs.partition_point(|&v| v <= x).clamp(1, n - 1) - 1;
    let w = (x - xs[j]) / (xs[j + 1] - xs[j]);
    (1.0 - w) * row[j] + w * row[j + 1]
}

/// Bilinear interpolation on a rectangular table, clamped at the edges.
pub fn interpolate(ts: &[f64], xs: &[f64], table: &[Vec<f64>], t: f64, x: f64) -> f64 {
    let nt = ts.len();
    if nt == 1 || t <= ts[0] {
        return lerp_row(xs, &table[0], x);
    }
    if t >= ts[nt - 1] {
        return lerp_row(xs, &table[nt - 1], x);
    }
    let i = ts.partition_point(|&v| v <= t).clamp(1, nt - 1) - 1;
    let w = (t - ts[i]) / (ts[i + 1] - ts[i]);
    (1.0 - w) * lerp_row(xs, &table[i], x) + w * lerp_row(xs, &table[i + 1], x)
}

#[derive(Serialize)]
struct SurfaceRow {
    t: f64,
    x: f64,
    g: f64,
    dgdx: f64,
}

impl ValueSurface {
    pub fn dx(&self) -> f64 {
        self.x_nodes[1] - self.x_nodes[0]
    }

    /// `G(t, x)` by bilinear interpolation.
    pub fn value(&self, t: f64, x: f64) -> f64 {
        interpolate(&self.t_nodes, &self.x_nodes, &self.g, t, x)
    }

    /// `G(t_i, x)` by linear interpolation in `x`.
    pub fn value_at_row(&self, i: usize, x: f64) -> f64 {
        lerp_row(&self.x_nodes, &self.g[i], x)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
        for (i, &t) in self.t_nodes.iter().enumerate() {
            for (j, &x) in self.x_nodes.iter().enumerate() {
                w.serialize(SurfaceRow {
                    t,
                    x,
                    g: self.g[i][j],
                    dgdx: self.grad[i][j],
                })
                .map_err(csv_error)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

/// Tabulates `sigma_r` at the space nodes of `grid` on at most
/// `SIGMA_ROWS + 1` uniformly spaced times.
pub fn sigma_table(curve: &CdsCurve, grid: &GridSpec) -> Result<CurveTable> {
    let t0 = grid.t_nodes[0];
    let t1 = *grid.t_nodes.last().unwrap();
    let rows = grid.nt().min(SIGMA_ROWS);
    let s: Vec<f64> = (0..=rows).map(|i| t0 + (t1 - t0) * i as f64 / rows as f64).collect();
    curve.tabulate(&s, &grid.x_nodes)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Stencil {
    Central,
    Forward,
    Backward,
}

#[derive(Debug, Clone)]
enum Body {
    Linear { reaction: f64, source: f64 },
    Ham {
        h: Box<HamiltonianInputs>,
        kind: HamiltonianKind,
        chi: f64,
        big_a: f64,
    },
    Fixed(f64),
}

#[derive(Debug, Clone)]
struct Node {
    half_a: f64,
    drift: f64,
    body: Body,
}

impl Node {
    fn source(&self, g: f64, p: f64) -> Result<f64> {
        match &self.body {
            Body::Linear { reaction, source } => Ok(source - reaction * g),
            Body::Ham { h, kind, chi, big_a } => {
                let ham = match kind {
                    HamiltonianKind::Complete => h.complete_value(g, &[p]),
                    HamiltonianKind::Incomplete => h.incomplete_value(g, &[p])?,
                    HamiltonianKind::EquityOnly => h.nocds_value(g, &[p]),
                };
                Ok(-0.5 * h.alpha * big_a * p * p + chi * (h.gamma / h.alpha + ham))
            }
            Body::Fixed(_) => Ok(0.0),
        }
    }

    /// `(F, dF/dg, dF/dp)`
    fn source_derivs(&self, g: f64, p: f64) -> Result<(f64, f64, f64)> {
        if let Body::Linear { reaction, source } = self.body {
            return Ok((source - reaction * g, -reaction, 0.0));
        }
        let f = self.source(g, p)?;
        let hg = FD_STEP * g.abs().max(1.0);
        let hp = FD_STEP * p.abs().max(1.0);
        let fg = (self.source(g + hg, p)? - f) / hg;
        let fp = (self.source(g, p + hp)? - f) / hp;
        Ok((f, fg, fp))
    }

    fn fixed(&self) -> Option<f64> {
        match self.body {
            Body::Fixed(v) => Some(v),
            _ => None,
        }
    }
}

struct Setup<'a> {
    spec: &'a ModelSpec,
    x: &'a [f64],
    dx: f64,
    equation: Equation,
    sigma: Option<&'a CurveTable>,
    mollifier: Option<Mollifier>,
    options: SolverOptions,
}

impl Setup<'_> {
    fn prepare(&self, t: f64) -> Result<Vec<Node>> {
        let nx = self.x.len();
        (0..nx)
            .into_par_iter()
            .with_min_len(32)
            .map(|j| self.prepare_node(t, j, nx))
            .collect()
    }

    fn prepare_node(&self, t: f64, j: usize, nx: usize) -> Result<Node> {
        let x = self.x[j];
        let xs = [x];
        let edge = j == 0 || j == nx - 1;
        if edge && self.options.boundary == Boundary::ZeroDirichlet {
            return Ok(Node {
                half_a: 0.0,
                drift: 0.0,
                body: Body::Fixed(0.0),
            });
        }
        let chi = self.mollifier.map_or(1.0, |m| m.eval(x));
        let point = self.spec.eval(t, &xs);
        let big_a = (&point.a * point.a.transpose())[(0, 0)];
        let psi = self.spec.psi(t, &xs);
        match self.equation {
            Equation::LinearComplete => {
                let drift = point.b[0] - (&point.a * &point.nu_tilde)[0];
                let q_c = self.spec.q_complete(t, &xs)?;
                Ok(Node {
                    half_a: 0.5 * big_a,
                    drift,
                    body: Body::Linear {
                        reaction: point.gamma_tilde,
                        source: point.gamma_tilde * psi + q_c / self.spec.alpha,
                    },
                })
            }
            Equation::Hamiltonian(kind) => {
                let sigma_r = match (kind, self.sigma) {
                    (HamiltonianKind::EquityOnly, _) => DVector::zeros(1),
                    (_, Some(tab)) => DVector::from_element(1, tab.sigma_r_at(t, j)),
                    (_, None) => return Err(Error::Model("CDS Hamiltonian needs a sigma_r table".into())),
                };
                let h = HamiltonianInputs::new(&point, &sigma_r, psi, self.spec.alpha, t, &xs)?;
                if kind == HamiltonianKind::Complete && (h.k5() == 0.0 || !h.k5().is_finite()) {
                    return Err(Error::Completeness {
                        t,
                        x: xs.to_vec(),
                        v_c: h.k5(),
                    });
                }
                Ok(Node {
                    half_a: 0.5 * big_a,
                    drift: point.b[0],
                    body: Body::Ham {
                        h: Box::new(h),
                        kind,
                        chi,
                        big_a,
                    },
                })
            }
        }
    }

    fn stencils(&self, nodes: &[Node], g: &[f64]) -> Result<Vec<Stencil>> {
        let nx = nodes.len();
        let dx = self.dx;
        (0..nx)
            .into_par_iter()
            .with_min_len(32)
            .map(|j| {
                if j == 0 {
                    return Ok(Stencil::Forward);
                }
                if j == nx - 1 {
                    return Ok(Stencil::Backward);
                }
                let node = &nodes[j];
                if node.fixed().is_some() {
                    return Ok(Stencil::Central);
                }
                let p = (g[j + 1] - g[j - 1]) / (2.0 * dx);
                let (_, _, fp) = node.source_derivs(g[j], p)?;
                let beta = node.drift + fp;
                if beta.abs() * dx > PECLET_LIMIT * node.half_a {
                    Ok(if beta > 0.0 { Stencil::Forward } else { Stencil::Backward })
                } else {
                    Ok(Stencil::Central)
                }
            })
            .collect()
    }

    /// `(A/2) D2 + beta D1 + F` at node `j`, with derivative weights on
    /// `G_{j-1}, G_j, G_{j+1}` when `derivs` is set.
    fn operator(
        &self,
        node: &Node,
        st: Stencil,
        g: &[f64],
        j: usize,
        derivs: bool,
    ) -> Result<(f64, [f64; 3])> {
        let nx = g.len();
        let dx = self.dx;
        let interior = j > 0 && j < nx - 1;
        let (p, c) = match st {
            Stencil::Central => ((g[j + 1] - g[j - 1]) / (2.0 * dx), [-0.5 / dx, 0.0, 0.5 / dx]),
            Stencil::Forward => ((g[j + 1] - g[j]) / dx, [0.0, -1.0 / dx, 1.0 / dx]),
            Stencil::Backward => ((g[j] - g[j - 1]) / dx, [-1.0 / dx, 1.0 / dx, 0.0]),
        };
        let (d2, w2) = if interior {
            ((g[j + 1] - 2.0 * g[j] + g[j - 1]) / (dx * dx), [1.0 / (dx * dx), -2.0 / (dx * dx), 1.0 / (dx * dx)])
        } else {
            (0.0, [0.0; 3])
        };
        if !derivs {
            let f = node.source(g[j], p)?;
            return Ok((node.half_a * d2 + node.drift * p + f, [0.0; 3]));
        }
        let (f, fg, fp) = node.source_derivs(g[j], p)?;
        let beta = node.drift + fp;
        let mut jac = [0.0; 3];
        for k in 0..3 {
            jac[k] = node.half_a * w2[k] + beta * c[k];
        }
        jac[1] += fg;
        Ok((node.half_a * d2 + node.drift * p + f, jac))
    }

    /// One theta-scheme step from `t_hi` to `t_lo`. `None` when Newton
    /// does not converge.
    fn step(
        &self,
        g_hi: &[f64],
        nodes_hi: &[Node],
        nodes_lo: &[Node],
        dt: f64,
    ) -> Result<Option<(Vec<f64>, usize)>> {
        let nx = g_hi.len();
        let th = self.options.theta;
        let st_hi = self.stencils(nodes_hi, g_hi)?;
        let st_lo = self.stencils(nodes_lo, g_hi)?;
        let explicit: Vec<f64> = if th < 1.0 {
            (0..nx)
                .into_par_iter()
                .with_min_len(32)
                .map(|j| match nodes_hi[j].fixed() {
                    Some(_) => Ok(0.0),
                    None => self.operator(&nodes_hi[j], st_hi[j], g_hi, j, false).map(|r| r.0),
                })
                .collect::<Result<_>>()?
        } else {
            vec![0.0; nx]
        };
        let linear = self.equation == Equation::LinearComplete;
        let mut g: Vec<f64> = g_hi.to_vec();
        for (j, node) in nodes_lo.iter().enumerate() {
            if let Some(v) = node.fixed() {
                g[j] = v;
            }
        }
        for iter in 1..=self.options.newton_max_iter {
            let rows: Vec<(f64, [f64; 3])> = (0..nx)
                .into_par_iter()
                .with_min_len(32)
                .map(|j| {
                    let node = &nodes_lo[j];
                    if let Some(v) = node.fixed() {
                        return Ok((g[j] - v, [0.0, 1.0, 0.0]));
                    }
                    let (op, jac) = self.operator(node, st_lo[j], &g, j, true)?;
                    let r = (g_hi[j] - g[j]) / dt + th * op + (1.0 - th) * explicit[j];
                    Ok((r, [th * jac[0], th * jac[1] - 1.0 / dt, th * jac[2]]))
                })
                .collect::<Result<_>>()?;
            if linear {
                check_dominance(&rows, nodes_lo)?;
            }
            let rhs: Vec<f64> = rows.iter().map(|r| -r.0).collect();
            let delta = match solve_tridiagonal(&rows, rhs) {
                Some(d) => d,
                None => return Ok(None),
            };
            let mut change: f64 = 0.0;
            let mut scale: f64 = 1.0;
            for j in 0..nx {
                g[j] += delta[j];
                change = change.max(delta[j].abs());
                scale = scale.max(g[j].abs());
            }
            if !change.is_finite() {
                return Ok(None);
            }
            if change <= self.options.newton_tol * scale {
                return Ok(Some((g, iter)));
            }
        }
        Ok(None)
    }

    /// PDE residual of levels `lo` and `hi` (two steps apart) measured with
    /// centred stencils of twice the grid spacing. For a consistent
    /// second-order solution this shrinks like the truncation error.
    fn wide_residual(&self, g_hi: &[f64], g_lo: &[f64], n_hi: &[Node], n_lo: &[Node], span: f64) -> Result<f64> {
        let nx = g_hi.len();
        if nx < 5 {
            return Ok(0.0);
        }
        let dx2 = 2.0 * self.dx;
        let op = |node: &Node, g: &[f64], j: usize| -> Result<f64> {
            let p = (g[j + 2] - g[j - 2]) / (2.0 * dx2);
            let d2 = (g[j + 2] - 2.0 * g[j] + g[j - 2]) / (dx2 * dx2);
            Ok(node.half_a * d2 + node.drift * p + node.source(g[j], p)?)
        };
        let vals: Vec<f64> = (2..nx - 2)
            .into_par_iter()
            .with_min_len(32)
            .map(|j| {
                if (j - 2..=j + 2).any(|m| n_hi[m].fixed().is_some() || n_lo[m].fixed().is_some()) {
                    return Ok(0.0);
                }
                let a = op(&n_hi[j], g_hi, j)?;
                let b = op(&n_lo[j], g_lo, j)?;
                Ok(((g_hi[j] - g_lo[j]) / span + 0.5 * (a + b)).abs())
            })
            .collect::<Result<_>>()?;
        Ok(vals.into_iter().fold(0.0, f64::max))
    }

    fn solve(&self, grid: &GridSpec) -> Result<ValueSurface> {
        let nt = grid.nt();
        let nx = self.x.len();
        let horizon = grid.t_nodes[nt];
        let mut g = vec![vec![0.0; nx]; nt + 1];
        for (j, &x) in self.x.iter().enumerate() {
            let chi = self.mollifier.map_or(1.0, |m| m.eval(x));
            g[nt][j] = chi * self.spec.phi(&[x]);
        }
        if self.options.boundary == Boundary::ZeroDirichlet {
            g[nt][0] = 0.0;
            g[nt][nx - 1] = 0.0;
        }
        let mut iterations = vec![0; nt];
        let mut halvings_used = 0;
        let mut max_residual: f64 = 0.0;
        let mut nodes_hi = self.prepare(horizon)?;
        let mut older: Option<Vec<Node>> = None;
        for i in (0..nt).rev() {
            let (t_lo, t_hi) = (grid.t_nodes[i], grid.t_nodes[i + 1]);
            let mut done = None;
            for k in 0..=self.options.max_halvings {
                let m = 1usize << k;
                let h = (t_hi - t_lo) / m as f64;
                let mut cur = g[i + 1].clone();
                let mut cur_nodes = nodes_hi.clone();
                let mut total = 0;
                let mut ok = true;
                for s in 1..=m {
                    let t = if s == m { t_lo } else { t_hi - h * s as f64 };
                    let next_nodes = self.prepare(t)?;
                    match self.step(&cur, &cur_nodes, &next_nodes, h)? {
                        Some((next, its)) => {
                            cur = next;
                            cur_nodes = next_nodes;
                            total += its;
                        }
                        None => {
                            ok = false;
                            break;
                        }
                    }
                }
                if ok {
                    halvings_used = halvings_used.max(k);
                    done = Some((cur, cur_nodes, total));
                    break;
                }
                log::warn!("Newton failed on [{t_lo}, {t_hi}] with {m} sub-steps; halving");
            }
            match done {
                Some((row, nodes, its)) => {
                    if let Some(n2) = &older {
                        let span = grid.t_nodes[i + 2] - t_lo;
                        max_residual = max_residual.max(self.wide_residual(&g[i + 2], &row, n2, &nodes, span)?);
                    }
                    g[i] = row;
                    older = Some(std::mem::replace(&mut nodes_hi, nodes));
                    iterations[i] = its;
                }
                None => {
                    return Err(Error::NewtonFailure {
                        t: t_lo,
                        halvings: self.options.max_halvings,
                        detail: format!("no convergence within {} iterations", self.options.newton_max_iter),
                    })
                }
            }
        }
        let dx = self.dx;
        let grad = g.iter().map(|row| gradient(row, dx)).collect();
        Ok(ValueSurface {
            equation: self.equation,
            options: self.options,
            mollifier: self.mollifier.map(|m| m.n),
            t_nodes: grid.t_nodes.clone(),
            x_nodes: grid.x_nodes.clone(),
            g,
            grad,
            newton_iterations: iterations,
            halvings: halvings_used,
            max_residual,
        })
    }
}

fn check_dominance(rows: &[(f64, [f64; 3])], nodes: &[Node]) -> Result<()> {
    for (j, (_, r)) in rows.iter().enumerate() {
        if nodes[j].fixed().is_some() {
            continue;
        }
        if r[1].abs() * (1.0 + 1e-12) < r[0].abs() + r[2].abs() {
            return Err(Error::GridRefinement(format!(
                "row {j} is not diagonally dominant after upwinding ({:?})",
                r
            )));
        }
    }
    Ok(())
}

/// Thomas algorithm; rows hold `(sub, diag, super)`.
fn solve_tridiagonal(rows: &[(f64, [f64; 3])], mut rhs: Vec<f64>) -> Option<Vec<f64>> {
    let n = rows.len();
    let mut c = vec![0.0; n];
    let mut b = rows[0].1[1];
    if b == 0.0 || !b.is_finite() {
        return None;
    }
    c[0] = rows[0].1[2] / b;
    rhs[0] /= b;
    for j in 1..n {
        let [a, d, u] = rows[j].1;
        b = d - a * c[j - 1];
        if b == 0.0 || !b.is_finite() {
            return None;
        }
        c[j] = u / b;
        rhs[j] = (rhs[j] - a * rhs[j - 1]) / b;
    }
    for j in (0..n - 1).rev() {
        rhs[j] -= c[j] * rhs[j + 1];
    }
    Some(rhs)
}

fn setup<'a>(
    spec: &'a ModelSpec,
    grid: &'a GridSpec,
    equation: Equation,
    sigma: Option<&'a CurveTable>,
    mollifier: Option<Mollifier>,
    options: SolverOptions,
) -> Result<Setup<'a>> {
    if spec.dims().0 != 1 {
        return Err(Error::Model("the finite-difference solver handles one factor".into()));
    }
    grid.validate(0.0)?;
    let dx = grid.dx();
    let uniform = grid
        .x_nodes
        .windows(2)
        .all(|w| ((w[1] - w[0]) - dx).abs() <= 1e-9 * dx.max(1.0));
    if !uniform {
        return Err(Error::Domain("space grid must be uniform".into()));
    }
    if !(options.theta > 0.0 && options.theta <= 1.0) {
        return Err(Error::Domain(format!("theta-scheme weight must lie in (0, 1], got {}", options.theta)));
    }
    if let Some(tab) = sigma {
        if tab.y_nodes.len() != grid.nx() {
            return Err(Error::Domain("sigma_r table does not match the space grid".into()));
        }
    }
    Ok(Setup {
        spec,
        x: &grid.x_nodes,
        dx,
        equation,
        sigma,
        mollifier,
        options,
    })
}

/// Linear PDE of the complete market with the spot-measure generator.
pub fn solve_linear_complete(
    spec: &ModelSpec,
    grid: &GridSpec,
    sigma: Option<&CurveTable>,
    options: SolverOptions,
) -> Result<ValueSurface> {
    if spec.mode != MarketMode::Complete {
        return Err(Error::Mode("linear solver needs the complete market".into()));
    }
    spec.validate(grid)?;
    if let Some(tab) = sigma {
        for &t in grid.t_nodes.iter().step_by((grid.nt() / 20).max(1)) {
            for (j, &x) in grid.x_nodes.iter().enumerate() {
                let v = spec.v_c(t, &[x], &DVector::from_element(1, tab.sigma_r_at(t, j)))?;
                if v == 0.0 {
                    return Err(Error::Completeness { t, x: vec![x], v_c: v });
                }
            }
        }
    }
    setup(spec, grid, Equation::LinearComplete, None, None, options)?.solve(grid)
}

/// Semi-linear PDE of the incomplete market.
pub fn solve_semilinear_incomplete(
    spec: &ModelSpec,
    grid: &GridSpec,
    sigma: &CurveTable,
    options: SolverOptions,
) -> Result<ValueSurface> {
    if !matches!(spec.mode, MarketMode::Incomplete { .. }) {
        return Err(Error::Mode("semi-linear solver needs the incomplete market".into()));
    }
    spec.validate(grid)?;
    sigma.regime()?;
    let eq = Equation::Hamiltonian(HamiltonianKind::Incomplete);
    setup(spec, grid, eq, Some(sigma), None, options)?.solve(grid)
}

/// Hamiltonian form of the PDE for the spec's market, optionally
/// mollified.
pub fn solve_hamiltonian(
    spec: &ModelSpec,
    grid: &GridSpec,
    sigma: &CurveTable,
    mollifier: Option<Mollifier>,
    options: SolverOptions,
) -> Result<ValueSurface> {
    spec.validate(grid)?;
    sigma.regime()?;
    let kind = match spec.mode {
        MarketMode::Complete => HamiltonianKind::Complete,
        MarketMode::Incomplete { .. } => HamiltonianKind::Incomplete,
    };
    setup(spec, grid, Equation::Hamiltonian(kind), Some(sigma), mollifier, options)?.solve(grid)
}

/// Localised problem on `O_n = (1/n, n)` with zero Dirichlet data.
pub fn solve_localized(spec: &ModelSpec, grid: &GridSpec, n: usize, sigma: &CurveTable) -> Result<ValueSurface> {
    let (lo, hi) = (grid.x_nodes[0], *grid.x_nodes.last().unwrap());
    let (a, b) = (1.0 / n as f64, n as f64);
    if (lo - a).abs() > 1e-12 || (hi - b).abs() > 1e-9 {
        return Err(Error::Domain(format!("grid [{lo}, {hi}] must span the closure of O_{n} = ({a}, {b})")));
    }
    let options = SolverOptions {
        boundary: Boundary::ZeroDirichlet,
        ..SolverOptions::default()
    };
    solve_hamiltonian(spec, grid, sigma, Some(Mollifier::new(n)?), options)
}

/// Equity-only benchmark: same market without the CDS.
///
/// Only the scalar parameters and `Sigma_e` are checked, so a market
/// without default (`gamma = 0`) is accepted.
pub fn solve_nocds_benchmark(spec: &ModelSpec, grid: &GridSpec, options: SolverOptions) -> Result<ValueSurface> {
    if !(spec.alpha > 0.0) {
        return Err(Error::Model(format!("risk aversion must be positive, got {}", spec.alpha)));
    }
    let eq = Equation::Hamiltonian(HamiltonianKind::EquityOnly);
    setup(spec, grid, eq, None, None, options)?.solve(grid)
}

/// Optimal positions at every node of a surface.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySurface {
    pub kind: HamiltonianKind,
    pub t_nodes: Vec<f64>,
    pub x_nodes: Vec<f64>,
    /// `theta[a][i][j]`: position in equity `a`
    pub theta: Vec<Vec<Vec<f64>>>,
    pub delta: Vec<Vec<f64>>,
    pub dual_intensity: Vec<Vec<f64>>,
    /// `NaN` for the equity-only benchmark
    pub decomposition_gap: Vec<Vec<f64>>,
}

impl PolicySurface {
    pub fn theta_at(&self, asset: usize, t: f64, x: f64) -> f64 {
        interpolate(&self.t_nodes, &self.x_nodes, &self.theta[asset], t, x)
    }

    pub fn delta_at(&self, t: f64, x: f64) -> f64 {
        interpolate(&self.t_nodes, &self.x_nodes, &self.delta, t, x)
    }

    pub fn max_decomposition_gap(&self) -> f64 {
        self.decomposition_gap
            .iter()
            .flatten()
            .filter(|v| !v.is_nan())
            .fold(0.0, |a, &b| a.max(b))
    }
}

/// Evaluates the optimal policies with `(g, p) = (G, grad G)` at every node.
pub fn extract_policies(
    surface: &ValueSurface,
    spec: &ModelSpec,
    sigma: Option<&CurveTable>,
) -> Result<PolicySurface> {
    let kind = match surface.equation {
        Equation::LinearComplete => HamiltonianKind::Complete,
        Equation::Hamiltonian(k) => k,
    };
    let needs_curve = kind != HamiltonianKind::EquityOnly;
    if needs_curve && sigma.is_none() {
        return Err(Error::Model("CDS policies need a sigma_r table".into()));
    }
    let (_, k) = spec.dims();
    let nt = surface.t_nodes.len();
    let nx = surface.x_nodes.len();
    type Row = (Vec<Vec<f64>>, Vec<f64>, Vec<f64>, Vec<f64>);
    let rows: Vec<Row> = (0..nt)
        .into_par_iter()
        .map(|i| {
            let t = surface.t_nodes[i];
            let mut th = vec![vec![0.0; nx]; k];
            let mut de = vec![0.0; nx];
            let mut du = vec![0.0; nx];
            let mut gap = vec![f64::NAN; nx];
            for j in 0..nx {
                let x = surface.x_nodes[j];
                let xs = [x];
                let point = spec.eval(t, &xs);
                let psi = spec.psi(t, &xs);
                let sr = match sigma {
                    Some(tab) if needs_curve => DVector::from_element(1, tab.sigma_r_at(t, j)),
                    _ => DVector::zeros(1),
                };
                let h = HamiltonianInputs::new(&point, &sr, psi, spec.alpha, t, &xs)?;
                let (g, p) = (surface.g[i][j], surface.grad[i][j]);
                let r = match kind {
                    HamiltonianKind::Complete => h.reduced_complete(g, &[p], t, &xs)?,
                    HamiltonianKind::Incomplete => h.reduced_incomplete(g, &[p])?,
                    HamiltonianKind::EquityOnly => h.reduced_nocds(g, &[p]),
                };
                for a in 0..k {
                    th[a][j] = r.theta[a];
                }
                de[j] = r.delta;
                du[j] = r.dual_intensity;
                if needs_curve {
                    gap[j] = decomposition_gap(&r.theta, r.delta, &point.loss, g, psi, point.gamma, r.dual_intensity, spec.alpha);
                }
            }
            Ok((th, de, du, gap))
        })
        .collect::<Result<_>>()?;
    let mut theta = vec![Vec::with_capacity(nt); k];
    let mut delta = Vec::with_capacity(nt);
    let mut dual = Vec::with_capacity(nt);
    let mut gaps = Vec::with_capacity(nt);
    for (th, de, du, gap) in rows {
        for (a, row) in th.into_iter().enumerate() {
            theta[a].push(row);
        }
        delta.push(de);
        dual.push(du);
        gaps.push(gap);
    }
    Ok(PolicySurface {
        kind,
        t_nodes: surface.t_nodes.clone(),
        x_nodes: surface.x_nodes.clone(),
        theta,
        delta,
        dual_intensity: dual,
        decomposition_gap: gaps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mollifier_profile() {
        let m = Mollifier::new(4).unwrap();
        assert_eq!(m.eval(0.25), 0.0);
        assert_eq!(m.eval(4.0), 0.0);
        assert_eq!(m.eval(1.0), 1.0);
        assert_eq!(m.eval(1.0 / 3.0), 1.0);
        assert_eq!(m.eval(3.0), 1.0);
        let mut prev = 0.0;
        for i in 0..=100 {
            let x = 0.25 + (1.0 / 3.0 - 0.25) * i as f64 / 100.0;
            let v = m.eval(x);
            assert!((0.0..=1.0).contains(&v) && v >= prev);
            prev = v;
        }
        assert!(Mollifier::new(1).is_err());
    }

    #[test]
    fn thomas_solves_small_system() {
        let rows = vec![(0.0, [0.0, 2.0, 1.0]), (0.0, [1.0, 3.0, 1.0]), (0.0, [1.0, 2.0, 0.0])];
        let x = solve_tridiagonal(&rows, vec![3.0, 5.0, 3.0]).unwrap();
        for v in x {
            assert!((v - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn gradient_one_sided_at_ends() {
        let g = gradient(&[0.0, 1.0, 4.0, 9.0], 1.0);
        assert_eq!(g, vec![1.0, 2.0, 4.0, 5.0]);
    }

    #[test]
    fn bilinear_interpolation() {
        let ts = [0.0, 1.0];
        let xs = [0.0, 1.0, 2.0];
        let tab = vec![vec![0.0, 1.0, 2.0], vec![1.0, 2.0, 3.0]];
        assert!((interpolate(&ts, &xs, &tab, 0.5, 1.5) - 2.0).abs() < 1e-15);
        assert_eq!(interpolate(&ts, &xs, &tab, -1.0, 5.0), 2.0);
    }
}

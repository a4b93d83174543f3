//! Market specification, coefficient evaluation and the derived scalar
//! fields `v_c`, `Q_c`, `Q_i`.
//!
//! Coefficients are supplied either by the affine CIR family ([`CirMarket`])
//! or by a user callback ([`CallbackCoefficients`]). Everything downstream
//! works on a [`PointCoefficients`] snapshot at a single `(t, x)`.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use std::fmt;
use std::sync::Arc;

/// Eigenvalues below this are clamped to zero when taking PSD square roots.
pub const PSD_CLAMP: f64 = 1e-12;

/// All model coefficients evaluated at one `(t, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCoefficients {
    /// factor drift `b`, length d
    pub b: DVector<f64>,
    /// factor diffusion `a`, d x d symmetric positive definite
    pub a: DMatrix<f64>,
    /// equity drift, length k
    pub mu_e: DVector<f64>,
    /// equity volatility, k x k invertible
    pub sigma_e: DMatrix<f64>,
    /// equity/factor correlation, k x d
    pub rho: DMatrix<f64>,
    /// fractional equity loss at default, length k
    pub loss: DVector<f64>,
    /// default intensity under the physical measure
    pub gamma: f64,
    /// default intensity under the spot pricing measure
    pub gamma_tilde: f64,
    /// factor risk premia under the spot pricing measure, length d
    pub nu_tilde: DVector<f64>,
}

/// Instantaneous covariation matrices of equities, CDS and factor.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariances {
    /// `sigma_e sigma_e'`
    pub sigma_e: DMatrix<f64>,
    /// `sigma_e rho a'`
    pub upsilon_e: DMatrix<f64>,
    /// (k+1) x (k+1) equity + CDS covariance
    pub sigma: DMatrix<f64>,
    /// (k+1) x d equity + CDS / factor covariation
    pub upsilon: DMatrix<f64>,
}

impl PointCoefficients {
    pub fn dims(&self) -> (usize, usize) {
        (self.b.len(), self.mu_e.len())
    }

    /// `A = a a'`
    pub fn big_a(&self) -> DMatrix<f64> {
        &self.a * self.a.transpose()
    }

    /// `sigma_e^{-1}`, failing with a coefficient error naming `(t, x)`.
    pub fn sigma_e_inverse(&self, t: f64, x: &[f64]) -> Result<DMatrix<f64>> {
        self.sigma_e
            .clone()
            .try_inverse()
            .filter(|m| m.iter().all(|v| v.is_finite()))
            .ok_or_else(|| Error::Coefficient {
                t,
                x: x.to_vec(),
                reason: "equity volatility sigma_e is singular".into(),
            })
    }

    /// Blockwise assembly of `Sigma_e, Upsilon_e, Sigma, Upsilon`.
    pub fn covariances(&self, sigma_r: &DVector<f64>, t: f64, x: &[f64]) -> Result<Covariances> {
        let (d, k) = self.dims();
        if sigma_r.len() != d {
            return Err(Error::Model(format!(
                "sigma_r has length {}, expected {d}",
                sigma_r.len()
            )));
        }
        let _ = self.sigma_e_inverse(t, x)?;
        let sigma_e = &self.sigma_e * self.sigma_e.transpose();
        let upsilon_e = &self.sigma_e * &self.rho * self.a.transpose();
        let big_a = self.big_a();
        let mut sigma = DMatrix::zeros(k + 1, k + 1);
        sigma.view_mut((0, 0), (k, k)).copy_from(&sigma_e);
        let cross = &upsilon_e * sigma_r;
        for i in 0..k {
            sigma[(i, k)] = cross[i];
            sigma[(k, i)] = cross[i];
        }
        sigma[(k, k)] = (sigma_r.transpose() * &big_a * sigma_r)[(0, 0)];
        let mut upsilon = DMatrix::zeros(k + 1, d);
        upsilon.view_mut((0, 0), (k, d)).copy_from(&upsilon_e);
        let bottom = sigma_r.transpose() * &big_a;
        for j in 0..d {
            upsilon[(k, j)] = bottom[(0, j)];
        }
        Ok(Covariances {
            sigma_e,
            upsilon_e,
            sigma,
            upsilon,
        })
    }

    /// Completeness determinant `1 + sigma_r' a sigma_e^{-1} l_e`.
    pub fn v_c(&self, sigma_r: &DVector<f64>, t: f64, x: &[f64]) -> Result<f64> {
        let inv = self.sigma_e_inverse(t, x)?;
        Ok(1.0 + (sigma_r.transpose() * &self.a * inv * &self.loss)[(0, 0)])
    }

    /// `sigma_e^{-1}(mu_e - gamma_tilde l_e)`
    pub fn complete_market_price_of_risk(&self, t: f64, x: &[f64]) -> Result<DVector<f64>> {
        let inv = self.sigma_e_inverse(t, x)?;
        Ok(inv * (&self.mu_e - self.gamma_tilde * &self.loss))
    }

    /// `Q_c = 1/2 |sigma_e^{-1}(mu_e - gt l_e)|^2 + gt (g/gt - log(g/gt) - 1)`
    pub fn q_complete(&self, t: f64, x: &[f64]) -> Result<f64> {
        let mpr = self.complete_market_price_of_risk(t, x)?;
        Ok(0.5 * mpr.norm_squared() + jump_entropy(self.gamma, self.gamma_tilde))
    }

    /// `rho_bar = sqrt(I_k - rho rho')`, PSD square root.
    pub fn rho_bar(&self) -> Result<DMatrix<f64>> {
        let k = self.mu_e.len();
        let m = DMatrix::identity(k, k) - &self.rho * self.rho.transpose();
        psd_sqrt(&m)
    }

    /// `Q_i` for the incomplete market; needs `rho_bar` invertible.
    pub fn q_incomplete(&self, t: f64, x: &[f64]) -> Result<f64> {
        let rho_bar = self.rho_bar()?;
        let rb_inv = rho_bar.try_inverse().ok_or_else(|| {
            Error::Model("I - rho rho' is not positive definite".into())
        })?;
        let mpr = self.complete_market_price_of_risk(t, x)?;
        let orth = rb_inv * (mpr - &self.rho * &self.nu_tilde);
        Ok(0.5 * self.nu_tilde.norm_squared()
            + 0.5 * orth.norm_squared()
            + jump_entropy(self.gamma, self.gamma_tilde))
    }
}

/// `gt (r - log r - 1)` with `r = g / gt`; the jump part of the entropy rate.
/// Continuous limits are used when either intensity vanishes.
pub fn jump_entropy(gamma: f64, gamma_tilde: f64) -> f64 {
    if gamma == gamma_tilde {
        return 0.0;
    }
    if gamma_tilde == 0.0 {
        return gamma;
    }
    if gamma == 0.0 {
        return f64::INFINITY;
    }
    let r = gamma / gamma_tilde;
    gamma_tilde * (r - r.ln() - 1.0)
}

/// `Q_c` of the CIR family from the scalars `|nu|^2`, `nu' sigma^{-1} l` and
/// `|sigma^{-1} l|^2`: `1/2 |sqrt(y) nu - (gt/sqrt(y)) sigma^{-1} l|^2` plus
/// the jump entropy. Finite at `y = 0` when `gt` vanishes there.
pub fn complete_entropy_rate(y: f64, nu2: f64, nu_sil: f64, sil2: f64, gamma: f64, gamma_tilde: f64) -> f64 {
    let tail = if gamma_tilde == 0.0 {
        0.0
    } else {
        gamma_tilde * gamma_tilde * sil2 / y
    };
    0.5 * (y * nu2 - 2.0 * gamma_tilde * nu_sil + tail) + jump_entropy(gamma, gamma_tilde)
}

/// Symmetric PSD square root via eigendecomposition, clamping eigenvalues
/// above `-PSD_CLAMP` to zero. Fails if the matrix is not PSD.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = 0.5 * (m + m.transpose());
    let eig = sym.symmetric_eigen();
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -PSD_CLAMP {
            return Err(Error::Model(format!(
                "matrix is not positive semi-definite (eigenvalue {v})"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&vals) * q.transpose())
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = 0.5 * (m + m.transpose());
    sym.symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Source of coefficient evaluations for one market instance.
pub trait Coefficients: Send + Sync + fmt::Debug {
    /// `(d, k)`: number of factors and equities.
    fn dims(&self) -> (usize, usize);

    fn eval(&self, t: f64, x: &[f64]) -> PointCoefficients;

    /// The affine CIR parametrisation, if this market has one.
    fn as_cir(&self) -> Option<&CirMarket> {
        None
    }

    /// Scalar factor dynamics `(b, a, nu_tilde)` for `d = 1`.
    fn factor_scalar(&self, t: f64, x: f64) -> (f64, f64, f64) {
        let p = self.eval(t, &[x]);
        (p.b[0], p.a[(0, 0)], p.nu_tilde[0])
    }

    /// `(gamma, gamma_tilde)`.
    fn intensities(&self, t: f64, x: &[f64]) -> (f64, f64) {
        let p = self.eval(t, x);
        (p.gamma, p.gamma_tilde)
    }

    fn q_complete(&self, t: f64, x: &[f64]) -> Result<f64> {
        self.eval(t, x).q_complete(t, x)
    }
}

/// Affine default intensity `level + slope * y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineIntensity {
    pub level: f64,
    pub slope: f64,
}

impl AffineIntensity {
    pub fn linear(slope: f64) -> Self {
        Self { level: 0.0, slope }
    }
    pub fn eval(&self, y: f64) -> f64 {
        self.level + self.slope * y
    }
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            level: self.level * c,
            slope: self.slope * c,
        }
    }
}

/// CIR factor `dX = kappa (theta - X) ds + xi sqrt(X) dW`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CirFactor {
    pub kappa: f64,
    pub theta: f64,
    pub xi: f64,
}

impl CirFactor {
    pub fn feller(&self) -> bool {
        2.0 * self.kappa * self.theta >= self.xi * self.xi
    }
}

/// How the spot pricing measure's factor risk premia are chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RiskPremia {
    /// `nu_tilde = rho' sigma_e^{-1}(mu_e - gamma_tilde l_e)`; in the complete
    /// case (`rho = 1`) this is the unique choice.
    Minimal,
    /// `nu_tilde(y) = c sqrt(y)`
    SqrtScaled(f64),
}

/// Affine CIR market: `mu_e = y sigma nu`, `sigma_e = sqrt(y) sigma`,
/// constant correlation and loss, affine intensities. Single factor.
#[derive(Debug, Clone, PartialEq)]
pub struct CirMarket {
    pub factor: CirFactor,
    /// market prices of risk `nu`, length k
    pub nu: DVector<f64>,
    /// volatility matrix `sigma`, k x k
    pub sigma: DMatrix<f64>,
    /// correlation with the factor, length k
    pub rho: DVector<f64>,
    /// loss at default, length k
    pub loss: DVector<f64>,
    pub gamma: AffineIntensity,
    pub gamma_tilde: AffineIntensity,
    pub risk_premia: RiskPremia,
}

impl CirMarket {
    pub fn k(&self) -> usize {
        self.nu.len()
    }

    /// `sigma^{-1} l`
    fn sigma_inv_loss(&self) -> DVector<f64> {
        self.sigma
            .clone()
            .try_inverse()
            .map(|inv| inv * &self.loss)
            .unwrap_or_else(|| DVector::from_element(self.k(), f64::NAN))
    }

    /// Factor risk premia `nu_tilde(y)`.
    pub fn nu_tilde(&self, y: f64) -> f64 {
        match self.risk_premia {
            RiskPremia::SqrtScaled(c) => c * y.max(0.0).sqrt(),
            RiskPremia::Minimal => {
                let sq = y.max(0.0).sqrt();
                if sq == 0.0 {
                    return 0.0;
                }
                let sil = self.sigma_inv_loss();
                let gt = self.gamma_tilde.eval(y);
                self.rho.dot(&(sq * &self.nu - (gt / sq) * sil))
            }
        }
    }

    /// Drift of the factor under the spot pricing measure: `(kappa~, kappa~ theta~)`.
    pub fn ptilde_drift(&self) -> (f64, f64) {
        let f = self.factor;
        match self.risk_premia {
            RiskPremia::SqrtScaled(c) => (f.kappa + f.xi * c, f.kappa * f.theta),
            RiskPremia::Minimal => {
                let sil = self.sigma_inv_loss();
                let rho_sil = self.rho.dot(&sil);
                let kt = f.kappa + f.xi * (self.rho.dot(&self.nu) - self.gamma_tilde.slope * rho_sil);
                let level = f.kappa * f.theta + f.xi * self.gamma_tilde.level * rho_sil;
                (kt, level)
            }
        }
    }

    /// The market restricted to equity `i`, with no default.
    ///
    /// The single equity keeps its drift, total volatility and factor
    /// correlation. Both intensities are zero; the unit loss only keeps
    /// `K3 > 0`.
    pub fn single_asset(&self, i: usize) -> CirMarket {
        let s = self.sigma.row(i).norm();
        let m = (&self.sigma * &self.nu)[i];
        let c = (&self.sigma * &self.rho)[i];
        CirMarket {
            factor: self.factor,
            nu: DVector::from_element(1, m / s),
            sigma: DMatrix::from_element(1, 1, s),
            rho: DVector::from_element(1, c / s),
            loss: DVector::from_element(1, 1.0),
            gamma: AffineIntensity::linear(0.0),
            gamma_tilde: AffineIntensity::linear(0.0),
            risk_premia: RiskPremia::SqrtScaled(0.0),
        }
    }

    /// Closed-form `Q_c(y)` for this family.
    pub fn q_complete_at(&self, y: f64) -> f64 {
        let sil = self.sigma_inv_loss();
        complete_entropy_rate(
            y,
            self.nu.norm_squared(),
            self.nu.dot(&sil),
            sil.norm_squared(),
            self.gamma.eval(y),
            self.gamma_tilde.eval(y),
        )
    }
}

impl Coefficients for CirMarket {
    fn dims(&self) -> (usize, usize) {
        (1, self.k())
    }

    fn eval(&self, _t: f64, x: &[f64]) -> PointCoefficients {
        let y = x[0];
        let f = self.factor;
        let sq = y.max(0.0).sqrt();
        let k = self.k();
        PointCoefficients {
            b: DVector::from_element(1, f.kappa * (f.theta - y)),
            a: DMatrix::from_element(1, 1, f.xi * sq),
            mu_e: y * (&self.sigma * &self.nu),
            sigma_e: sq * &self.sigma,
            rho: DMatrix::from_column_slice(k, 1, self.rho.as_slice()),
            loss: self.loss.clone(),
            gamma: self.gamma.eval(y),
            gamma_tilde: self.gamma_tilde.eval(y),
            nu_tilde: DVector::from_element(1, self.nu_tilde(y)),
        }
    }

    fn as_cir(&self) -> Option<&CirMarket> {
        Some(self)
    }

    fn factor_scalar(&self, _t: f64, x: f64) -> (f64, f64, f64) {
        let f = self.factor;
        (f.kappa * (f.theta - x), f.xi * x.max(0.0).sqrt(), self.nu_tilde(x))
    }

    fn intensities(&self, _t: f64, x: &[f64]) -> (f64, f64) {
        (self.gamma.eval(x[0]), self.gamma_tilde.eval(x[0]))
    }

    fn q_complete(&self, _t: f64, x: &[f64]) -> Result<f64> {
        Ok(self.q_complete_at(x[0]))
    }
}

type PointFn = dyn Fn(f64, &[f64]) -> PointCoefficients + Send + Sync;

/// Generic coefficients from a closure.
#[derive(Clone)]
pub struct CallbackCoefficients {
    dims: (usize, usize),
    f: Arc<PointFn>,
}

impl CallbackCoefficients {
    pub fn new(
        d: usize,
        k: usize,
        f: impl Fn(f64, &[f64]) -> PointCoefficients + Send + Sync + 'static,
    ) -> Self {
        Self {
            dims: (d, k),
            f: Arc::new(f),
        }
    }
}

impl fmt::Debug for CallbackCoefficients {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CallbackCoefficients")
            .field("dims", &self.dims)
            .finish_non_exhaustive()
    }
}

impl Coefficients for CallbackCoefficients {
    fn dims(&self) -> (usize, usize) {
        self.dims
    }
    fn eval(&self, t: f64, x: &[f64]) -> PointCoefficients {
        (self.f)(t, x)
    }
}

type FieldFn = dyn Fn(f64, &[f64]) -> f64 + Send + Sync;

/// A scalar function of `(t, x)`; used for the claim `phi` and the
/// post-default value `psi`.
#[derive(Clone)]
pub enum ScalarField {
    Constant(f64),
    Function(Arc<FieldFn>),
}

impl ScalarField {
    pub fn zero() -> Self {
        ScalarField::Constant(0.0)
    }

    pub fn from_fn(f: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        ScalarField::Function(Arc::new(f))
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        match self {
            ScalarField::Constant(c) => *c,
            ScalarField::Function(f) => f(t, x),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, ScalarField::Constant(c) if *c == 0.0)
    }

    /// `self + c * other`
    pub fn add_scaled(&self, c: f64, other: &ScalarField) -> ScalarField {
        match (self, other) {
            (_, o) if c == 0.0 || o.is_zero() => self.clone(),
            (ScalarField::Constant(a), ScalarField::Constant(b)) => ScalarField::Constant(a + c * b),
            _ => {
                let (a, b) = (self.clone(), other.clone());
                ScalarField::from_fn(move |t, x| a.eval(t, x) + c * b.eval(t, x))
            }
        }
    }
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScalarField::Constant(c) => write!(f, "Constant({c})"),
            ScalarField::Function(_) => write!(f, "Function(..)"),
        }
    }
}

/// Which Hamiltonian reduction applies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MarketMode {
    /// `k = d`, `rho = I_d`, equity-CDS market complete.
    Complete,
    /// `(1 - epsilon1) I_k - rho rho'` positive semi-definite.
    Incomplete { epsilon1: f64 },
}

/// One market instance: coefficients, claim, post-default value and scalars.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub coefficients: Arc<dyn Coefficients>,
    /// terminal claim `phi(x)` (evaluated with `t = T`)
    pub payoff: ScalarField,
    /// post-default certainty equivalent `psi(t, x)`
    pub post_default: ScalarField,
    /// recovery paid at default on the claim, added to `psi`; unlike the
    /// post-default value it need not vanish at `T`
    pub recovery: ScalarField,
    pub alpha: f64,
    pub horizon: f64,
    pub cds_maturity: f64,
    pub mode: MarketMode,
}

impl ModelSpec {
    pub fn dims(&self) -> (usize, usize) {
        self.coefficients.dims()
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> PointCoefficients {
        self.coefficients.eval(t, x)
    }

    pub fn cir(&self) -> Option<&CirMarket> {
        self.coefficients.as_cir()
    }

    pub fn phi(&self, x: &[f64]) -> f64 {
        self.payoff.eval(self.horizon, x)
    }

    pub fn psi(&self, t: f64, x: &[f64]) -> f64 {
        self.post_default.eval(t, x) + self.recovery.eval(t, x)
    }

    /// Same market with claim `phi = q`.
    pub fn with_payoff(&self, payoff: ScalarField) -> ModelSpec {
        ModelSpec {
            payoff,
            ..self.clone()
        }
    }

    pub fn with_notional(&self, q: f64) -> ModelSpec {
        self.with_payoff(ScalarField::Constant(q))
    }

    pub fn q_complete(&self, t: f64, x: &[f64]) -> Result<f64> {
        self.coefficients.q_complete(t, x)
    }

    pub fn q_incomplete(&self, t: f64, x: &[f64]) -> Result<f64> {
        self.eval(t, x).q_incomplete(t, x)
    }

    /// `Sigma_e, Upsilon_e, Sigma, Upsilon` at `(t, x)` given `sigma_r`.
    pub fn eval_covariances(&self, t: f64, x: &[f64], sigma_r: &DVector<f64>) -> Result<Covariances> {
        self.eval(t, x).covariances(sigma_r, t, x)
    }

    pub fn v_c(&self, t: f64, x: &[f64], sigma_r: &DVector<f64>) -> Result<f64> {
        if self.mode != MarketMode::Complete {
            return Err(Error::Mode("v_c is defined for the complete market only".into()));
        }
        self.eval(t, x).v_c(sigma_r, t, x)
    }

    /// Checks the scalar parameters and the pointwise invariants at every
    /// node of `grid`.
    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Model(format!("risk aversion must be positive, got {}", self.alpha)));
        }
        if !(self.horizon > 0.0) || !(self.cds_maturity > self.horizon) {
            return Err(Error::Model(format!(
                "need 0 < T < T~, got T={} T~={}",
                self.horizon, self.cds_maturity
            )));
        }
        let (d, k) = self.dims();
        if let MarketMode::Complete = self.mode {
            if k != d {
                return Err(Error::Mode(format!("complete mode needs k = d, got k={k} d={d}")));
            }
        }
        if let MarketMode::Incomplete { epsilon1 } = self.mode {
            if !(epsilon1 > 0.0 && epsilon1 < 1.0) {
                return Err(Error::Mode(format!("epsilon1 must lie in (0,1), got {epsilon1}")));
            }
        }
        for &t in &grid.t_nodes {
            for &x in &grid.x_nodes {
                self.validate_point(t, &[x])?;
            }
        }
        for &x in &grid.x_nodes {
            let psi_t = self.post_default.eval(self.horizon, &[x]);
            if psi_t.abs() > 1e-12 {
                return Err(Error::Model(format!("psi(T, {x}) = {psi_t} must vanish")));
            }
        }
        Ok(())
    }

    fn validate_point(&self, t: f64, x: &[f64]) -> Result<()> {
        let p = self.eval(t, x);
        let (_, k) = p.dims();
        let err = |reason: String| Error::Coefficient {
            t,
            x: x.to_vec(),
            reason,
        };
        p.sigma_e_inverse(t, x)?;
        if !(p.gamma > 0.0) || !(p.gamma_tilde > 0.0) {
            return Err(err(format!(
                "intensities must be positive (gamma={}, gamma_tilde={})",
                p.gamma, p.gamma_tilde
            )));
        }
        if !(p.loss.norm_squared() > 0.0) || p.loss.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(err(format!("loss {:?} must lie in [0,1]^k with l'l > 0", p.loss.as_slice())));
        }
        let rr = &p.rho * p.rho.transpose();
        let ident = DMatrix::<f64>::identity(k, k);
        if min_eigenvalue(&(&ident - &rr)) < -PSD_CLAMP {
            return Err(err("I - rho rho' is not positive semi-definite".into()));
        }
        match self.mode {
            MarketMode::Complete => {
                let (d, _) = p.dims();
                if (&p.rho - DMatrix::<f64>::identity(k, d)).amax() > 1e-12 {
                    return Err(Error::Mode("complete mode requires rho = I".into()));
                }
            }
            MarketMode::Incomplete { epsilon1 } => {
                if min_eigenvalue(&((1.0 - epsilon1) * &ident - &rr)) < -PSD_CLAMP {
                    return Err(Error::Mode(format!(
                        "(1 - {epsilon1}) I - rho rho' is not positive semi-definite"
                    )));
                }
            }
        }
        if self.psi(t, x) < 0.0 {
            return Err(err("post-default value psi must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Uniform rectangular time/space grid (single factor).
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub t_nodes: Vec<f64>,
    pub x_nodes: Vec<f64>,
    /// localisation level `n` when the domain is `(1/n, n)`
    pub domain_index: Option<usize>,
}

impl GridSpec {
    /// `nt` steps on `[0, horizon]` and `nx` nodes on `[x_min, x_max]`.
    pub fn uniform(horizon: f64, nt: usize, x_min: f64, x_max: f64, nx: usize) -> Result<Self> {
        if nt < 1 || nx < 3 {
            return Err(Error::Domain(format!("grid needs nt >= 1 and nx >= 3, got {nt}x{nx}")));
        }
        if !(x_max > x_min) || !(horizon > 0.0) {
            return Err(Error::Domain(format!(
                "degenerate grid: horizon={horizon}, x in [{x_min}, {x_max}]"
            )));
        }
        let t_nodes = (0..=nt).map(|i| horizon * i as f64 / nt as f64).collect();
        let dx = (x_max - x_min) / (nx - 1) as f64;
        let x_nodes = (0..nx).map(|j| x_min + dx * j as f64).collect();
        Ok(Self {
            t_nodes,
            x_nodes,
            domain_index: None,
        })
    }

    /// Grid on the localisation domain `[1/n, n]` of the CIR state space.
    pub fn localized(horizon: f64, nt: usize, n: usize, nx: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Domain(format!("localisation level must be >= 2, got {n}")));
        }
        let mut g = Self::uniform(horizon, nt, 1.0 / n as f64, n as f64, nx)?;
        g.domain_index = Some(n);
        Ok(g)
    }

    pub fn nt(&self) -> usize {
        self.t_nodes.len() - 1
    }
    pub fn nx(&self) -> usize {
        self.x_nodes.len()
    }
    pub fn dt(&self) -> f64 {
        self.t_nodes[1] - self.t_nodes[0]
    }
    pub fn dx(&self) -> f64 {
        self.x_nodes[1] - self.x_nodes[0]
    }

    /// Strictly increasing nodes with the space domain inside `(lower, inf)`.
    pub fn validate(&self, state_lower_bound: f64) -> Result<()> {
        let inc = |v: &[f64]| v.windows(2).all(|w| w[1] > w[0]);
        if !inc(&self.t_nodes) || !inc(&self.x_nodes) {
            return Err(Error::Domain("grid nodes must be strictly increasing".into()));
        }
        if self.x_nodes[0] <= state_lower_bound {
            return Err(Error::Domain(format!(
                "x_min = {} must lie strictly inside the state space (> {state_lower_bound})",
                self.x_nodes[0]
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_point(sigma_e: f64, a: f64) -> PointCoefficients {
        PointCoefficients {
            b: DVector::from_element(1, 0.0),
            a: DMatrix::from_element(1, 1, a),
            mu_e: DVector::from_element(1, 0.1),
            sigma_e: DMatrix::from_element(1, 1, sigma_e),
            rho: DMatrix::from_element(1, 1, 1.0),
            loss: DVector::from_element(1, 0.5),
            gamma: 0.2,
            gamma_tilde: 0.3,
            nu_tilde: DVector::from_element(1, 0.0),
        }
    }

    #[test]
    fn blockwise_covariances_scalar() {
        let p = scalar_point(2.0, 3.0);
        let c = p.covariances(&DVector::from_element(1, 0.0), 0.0, &[1.0]).unwrap();
        assert_eq!(c.sigma_e[(0, 0)], 4.0);
        assert_eq!(c.upsilon_e[(0, 0)], 6.0);
        assert_eq!(c.sigma, DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 0.0]));
        // bottom row of Upsilon is sigma_r' A, zero when sigma_r = 0
        assert_eq!(c.upsilon, DMatrix::from_row_slice(2, 1, &[6.0, 0.0]));
        // singular Sigma when sigma_r = 0
        assert_eq!(c.sigma.determinant(), 0.0);

        let c = p.covariances(&DVector::from_element(1, 0.5), 0.0, &[1.0]).unwrap();
        assert_eq!(c.upsilon[(1, 0)], 4.5);
        assert_eq!(c.sigma[(1, 1)], 0.25 * 9.0);
        assert_eq!(c.sigma[(0, 1)], 3.0);
    }

    #[test]
    fn singular_sigma_names_point() {
        let p = scalar_point(0.0, 1.0);
        let e = p.covariances(&DVector::from_element(1, 0.0), 0.5, &[0.25]).unwrap_err();
        match e {
            Error::Coefficient { t, x, .. } => {
                assert_eq!(t, 0.5);
                assert_eq!(x, vec![0.25]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn v_c_values() {
        let p = scalar_point(0.9762, 0.1);
        assert_eq!(p.v_c(&DVector::from_element(1, 0.0), 0.0, &[1.0]).unwrap(), 1.0);
        let v = p.v_c(&DVector::from_element(1, 0.5), 0.0, &[1.0]).unwrap();
        assert!((v - (1.0 + 0.5 * 0.1 * 0.5 / 0.9762)).abs() < 1e-15);
        assert!(v >= 1.0);
    }

    #[test]
    fn q_complete_values() {
        let mut p = scalar_point(1.0, 1.0);
        p.mu_e = DVector::from_element(1, p.gamma_tilde * 0.5);
        p.gamma = p.gamma_tilde;
        assert!(p.q_complete(0.0, &[1.0]).unwrap().abs() < 1e-15);
        p.gamma = 2.0 * p.gamma_tilde;
        let expected = p.gamma_tilde * (2.0 - 2f64.ln() - 1.0);
        assert!((p.q_complete(0.0, &[1.0]).unwrap() - expected).abs() < 1e-15);
        assert!((expected / p.gamma_tilde - 0.306853).abs() < 1e-6);
    }

    #[test]
    fn rho_bar_identity() {
        let mut p = scalar_point(1.0, 1.0);
        p.mu_e = DVector::from_vec(vec![0.1, 0.2]);
        p.sigma_e = DMatrix::identity(2, 2);
        p.rho = DMatrix::from_column_slice(2, 1, &[-0.53, -0.32]);
        p.loss = DVector::from_vec(vec![0.0, 0.5]);
        let rb = p.rho_bar().unwrap();
        let recon = &rb * rb.transpose() + &p.rho * p.rho.transpose();
        assert!((recon - DMatrix::<f64>::identity(2, 2)).amax() < 1e-10);
    }

    #[test]
    fn cir_closed_form_q_matches_generic() {
        let m = CirMarket {
            factor: CirFactor { kappa: 0.25, theta: 0.06, xi: 0.1 },
            nu: DVector::from_element(1, 4.0762),
            sigma: DMatrix::from_element(1, 1, 0.9762),
            rho: DVector::from_element(1, 1.0),
            loss: DVector::from_element(1, 0.5),
            gamma: AffineIntensity::linear(0.5076),
            gamma_tilde: AffineIntensity::linear(1.5 * 0.5076),
            risk_premia: RiskPremia::Minimal,
        };
        for y in [0.01, 0.06, 0.4] {
            let generic = m.eval(0.0, &[y]).q_complete(0.0, &[y]).unwrap();
            assert!((generic - m.q_complete_at(y)).abs() < 1e-12);
            let p = m.eval(0.0, &[y]);
            // minimal premia coincide with sigma_e^{-1}(mu_e - gt l) when rho = 1
            let mpr = p.complete_market_price_of_risk(0.0, &[y]).unwrap();
            assert!((mpr[0] - p.nu_tilde[0]).abs() < 1e-12);
            let (b, a, nt) = m.factor_scalar(0.0, y);
            assert_eq!((b, a, nt), (p.b[0], p.a[(0, 0)], p.nu_tilde[0]));
        }
    }

    #[test]
    fn grid_validation() {
        let g = GridSpec::uniform(1.0, 10, 0.0, 1.0, 11).unwrap();
        assert!(g.validate(0.0).is_err());
        let g = GridSpec::localized(1.0, 10, 3, 11).unwrap();
        assert!(g.validate(0.0).is_ok());
        assert_eq!(g.domain_index, Some(3));
        assert!(GridSpec::localized(1.0, 10, 1, 11).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn q_complete_nonnegative(
                mu in -5.0f64..5.0, s in 0.1f64..3.0, l in 0.01f64..1.0,
                g in 0.01f64..5.0, gt in 0.01f64..5.0,
            ) {
                let p = PointCoefficients {
                    b: DVector::from_element(1, 0.0),
                    a: DMatrix::from_element(1, 1, 1.0),
                    mu_e: DVector::from_element(1, mu),
                    sigma_e: DMatrix::from_element(1, 1, s),
                    rho: DMatrix::from_element(1, 1, 1.0),
                    loss: DVector::from_element(1, l),
                    gamma: g,
                    gamma_tilde: gt,
                    nu_tilde: DVector::from_element(1, 0.0),
                };
                prop_assert!(p.q_complete(0.0, &[1.0]).unwrap() >= 0.0);
            }

            #[test]
            fn complete_upsilon_reduces_to_a(
                s11 in 0.2f64..2.0, s12 in -0.5f64..0.5, s22 in 0.2f64..2.0,
                a11 in 0.2f64..2.0, a12 in -0.3f64..0.3, a22 in 0.2f64..2.0,
            ) {
                let sigma_e = DMatrix::from_row_slice(2, 2, &[s11, s12, -s12, s22]);
                let a = DMatrix::from_row_slice(2, 2, &[a11, a12, a12, a22]);
                let p = PointCoefficients {
                    b: DVector::zeros(2), a: a.clone(), mu_e: DVector::zeros(2), sigma_e,
                    rho: DMatrix::identity(2, 2), loss: DVector::from_vec(vec![0.5, 0.2]),
                    gamma: 1.0, gamma_tilde: 1.0, nu_tilde: DVector::zeros(2),
                };
                let c = p.covariances(&DVector::zeros(2), 0.0, &[1.0, 1.0]).unwrap();
                let inv = c.sigma_e.clone().try_inverse().unwrap();
                let red = c.upsilon_e.transpose() * inv * &c.upsilon_e;
                prop_assert!((red - &a * a.transpose()).amax() < 1e-10);
            }

            #[test]
            fn q_incomplete_nonnegative(
                r1 in -0.6f64..0.6, r2 in -0.6f64..0.6, nt in -3.0f64..3.0, y in 0.01f64..2.0,
            ) {
                let p = PointCoefficients {
                    b: DVector::zeros(1), a: DMatrix::from_element(1, 1, 0.1 * y.sqrt()),
                    mu_e: DVector::from_vec(vec![0.3 * y, 0.5 * y]),
                    sigma_e: DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.9]) * y.sqrt(),
                    rho: DMatrix::from_column_slice(2, 1, &[r1, r2]),
                    loss: DVector::from_vec(vec![0.0, 0.5]),
                    gamma: 0.5 * y, gamma_tilde: 0.75 * y, nu_tilde: DVector::from_element(1, nt),
                };
                prop_assert!(p.q_incomplete(0.0, &[y]).unwrap() >= 0.0);
            }
        }
    }
}

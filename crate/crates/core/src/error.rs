use thiserror::Error;

/// Errors raised by the model, solvers and oracles.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("coefficient error at (t={t}, x={x:?}): {reason}")]
    Coefficient { t: f64, x: Vec<f64>, reason: String },

    #[error("model error: {0}")]
    Model(String),

    #[error("mode error: {0}")]
    Mode(String),

    #[error("measure change error: kappa_tilde = {kappa_tilde} must be positive")]
    MeasureChange { kappa_tilde: f64 },

    #[error("completeness violated: v_c = {v_c} at (t={t}, x={x:?})")]
    Completeness { t: f64, x: Vec<f64>, v_c: f64 },

    #[error("degenerate Schur complement: K1 = {k1} with |sigma_r| = {sigma_norm}")]
    DegenerateSchur { k1: f64, sigma_norm: f64 },

    #[error("singular CDS curve: annuity {annuity} at (s={s}, y={y})")]
    SingularCurve { s: f64, y: f64, annuity: f64 },

    #[error("mixed sigma_r regime: {zero} zero and {positive} positive nodes")]
    MixedRegime { zero: usize, positive: usize },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("grid refinement required: {0}")]
    GridRefinement(String),

    #[error("Newton failure at t={t} after {halvings} step halvings: {detail}")]
    NewtonFailure {
        t: f64,
        halvings: usize,
        detail: String,
    },

    #[error("horizon error: Riccati blow-up at t={blow_up_time}")]
    Horizon { blow_up_time: f64 },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

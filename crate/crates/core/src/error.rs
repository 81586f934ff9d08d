use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("grid too small: {points} interior points (need at least 4, and at least 2 per axis)")]
    GridTooSmall { points: usize },

    #[error("singular potential: soft-Coulomb softening is 0 and node {node} lies at the origin")]
    SingularPotential { node: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: String, found: String },

    #[error("no convergence in {what} after {iterations} iterations")]
    NoConvergence { what: &'static str, iterations: usize },

    #[error("operator is not positive definite ({0}); increase the spectral shift sigma")]
    NotPositiveDefinite(String),

    #[error("block state is rank deficient: lambda_min = {lambda_min:e}, lambda_max = {lambda_max:e}")]
    RankDeficient { lambda_min: f64, lambda_max: f64 },

    #[error("predictor small system is singular (time step {tau} too large or rank collapse)")]
    SmallSolveSingular { tau: f64 },

    #[error("lambda_1 estimate missing; call estimate_lambda1 first")]
    MissingLambda1,

    #[error("reference state has zero norm")]
    ZeroReference,

    #[error("insufficient data for rate fit: {points} usable points (need 5)")]
    InsufficientData { points: usize },

    #[error("closed-form bracket matrix is not positive definite at t = {t}")]
    BracketNotSpd { t: f64 },

    #[error("spectral gap too small: rho_N / rho_(N+1) = {ratio}")]
    GapTooSmall { ratio: f64 },

    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),

    #[error("time step {tau} exceeds the quasi-Stiefel bound {bound}")]
    StepTooLarge { tau: f64, bound: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("state file error: {0}")]
    StateFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, found: impl ToString) -> Self {
        Error::DimensionMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}

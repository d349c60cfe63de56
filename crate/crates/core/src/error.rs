use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid lattice: {0}")]
    InvalidLattice(String),

    #[error("unknown initial state kind `{0}`")]
    UnknownInitialState(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("{sites} sites exceed the dense storage cap of {cap}")]
    TooManySites { sites: usize, cap: usize },

    #[error("invalid site subset: {0}")]
    InvalidSubset(String),

    #[error("step size underflow at t = {t} (h = {h:e})")]
    StepUnderflow { t: f64, h: f64 },

    #[error("non-finite derivative at t = {t}")]
    NonFinite { t: f64, snapshot: Vec<f64> },

    #[error("step budget of {max_steps} exhausted at t = {t}")]
    TooManySteps { t: f64, max_steps: usize },

    #[error("not a fixed point: residual {residual:e}")]
    NotFixedPoint { residual: f64 },

    #[error("matrix is not Hermitian (deviation {0:e})")]
    NotHermitian(f64),

    #[error("time series: {0}")]
    Series(String),

    #[error("analysis window [{start}, {end}] exceeds series range [{first}, {last}]")]
    WindowOutOfRange { start: f64, end: f64, first: f64, last: f64 },

    #[error("fit: {0}")]
    Fit(String),

    #[error("config: {0}")]
    Config(String),

    #[error("journal: {0}")]
    Journal(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

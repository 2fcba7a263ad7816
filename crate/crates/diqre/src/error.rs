use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("insufficient data: input class (x={x}, y={y}) has no counts")]
    InsufficientData { x: u8, y: u8 },
    #[error("optimization did not converge: {0}")]
    Optimization(String),
    #[error("PEF barrier did not reach relative gap {tol:e}: best rate {rate:e}, dual bound {dual_bound:e}")]
    PefGap { tol: f64, rate: f64, dual_bound: f64 },
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("transform precision audit failed: residual {residual:.3} from nearest integer; use a smaller block length")]
    Precision { residual: f64 },
    #[error("seed exhausted after {consumed} bits")]
    SeedUnderflow { consumed: u64 },
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("audit failed: {0}")]
    Audit(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

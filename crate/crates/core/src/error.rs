use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite point {0:?}")]
    NonFinite(Vec<f64>),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("sublevel set of the weight function is unbounded below level {level}")]
    UnboundedSublevelSet { level: f64 },

    #[error("coarse chain is reducible: {0}")]
    Reducible(String),

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("exact stationary mean of the force function is unavailable")]
    NoExactMean,

    #[error("{}", match .line { Some(l) => format!("config line {l}: {message}"), None => format!("config: {message}") })]
    Config { line: Option<usize>, message: String },

    #[error("malformed text record: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_finite(x: &[f64]) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(x.to_vec()))
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { expected, got })
    }
}

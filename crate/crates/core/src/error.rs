use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("gram matrix is not positive definite (output dim {dim})")]
    NotPositiveDefinite { dim: usize },

    #[error("posterior variance {value:e} is negative beyond tolerance (output dim {dim})")]
    NegativeVariance { dim: usize, value: f64 },

    #[error("no candidate radius certifies step {step}: best K = {k:e} gives p = {p:e}")]
    Infeasible { step: usize, k: f64, p: f64 },

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

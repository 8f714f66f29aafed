use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid ensemble: {0}")]
    InvalidEnsemble(String),

    #[error("column {column} of transform sums to {sum}, expected 1")]
    ColumnSum { column: usize, sum: f64 },

    #[error("weights are not a probability vector: {0}")]
    InvalidWeights(String),

    #[error("parameter out of range: {0}")]
    OutOfRange(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("transport problem infeasible: {0}")]
    Infeasible(String),

    #[error("matrix not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("no convergence: {0}")]
    NoConvergence(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

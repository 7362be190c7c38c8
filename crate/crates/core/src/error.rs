use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid hazard: increment {increment} at t={time} outside [0, 1]")]
    InvalidHazard { time: f64, increment: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("incompatible specification: {0}")]
    Incompatible(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("fold split failed: {0}")]
    Split(String),
}

pub type Result<T> = std::result::Result<T, Error>;

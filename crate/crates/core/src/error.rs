use thiserror::Error;

/// Errors raised anywhere in the filtering pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite {what} at step {step} (x = {x})")]
    NonFinite { what: &'static str, step: usize, x: f64 },

    #[error("non-finite matrix entry {matrix}[{row}][{col}]")]
    NonFiniteEntry {
        matrix: &'static str,
        row: usize,
        col: usize,
    },

    #[error("implicit system is singular (rcond estimate {rcond:e}); check the mu override")]
    SingularSystem { rcond: f64 },

    #[error("density mass {mass:e} at or below floor {floor:e}")]
    DegenerateMass { mass: f64, floor: f64 },

    #[error("particle weights collapsed at step {step}")]
    WeightCollapse { step: usize },

    #[error("model is not linear-Gaussian: {0}")]
    NotLinear(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

/// Errors produced by the unmixing library.
#[derive(Debug, Error)]
pub enum PlmmError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate subspace: data rank {rank} is below the required {required}")]
    DegenerateSubspace { rank: usize, required: usize },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("infeasible positivity bounds on row {row}, column {col}: lower {lower} > upper {upper}")]
    InfeasibleBounds {
        row: usize,
        col: usize,
        lower: f64,
        upper: f64,
    },

    #[error("spectral angle undefined: column {0} has zero norm")]
    UndefinedAngle(usize),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PlmmError>;

pub(crate) fn ensure_shape(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(PlmmError::Shape(msg()))
    }
}

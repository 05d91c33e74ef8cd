use thiserror::Error;

/// Errors raised by the numerical kernels.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("tensor quadrature with {nodes} nodes per mode over {modes} modes exceeds the node budget")]
    QuadratureOverflow { modes: usize, nodes: usize },

    #[error("sigma*sigma is not positive semidefinite at mode {mode} (radicand {radicand:e})")]
    Positivity { mode: usize, radicand: f64 },

    #[error("point outside the interpolation domain (|x_{mode}| = {value} > {half_width})")]
    Extrapolation { mode: usize, value: f64, half_width: f64 },

    #[error("Picard iteration is not contracting (ratio {ratio:.4} >= 1 for 3 consecutive iterations); delta too large")]
    NonContraction { ratio: f64 },

    #[error("iteration limit {max_iter} reached (last distance {last_distance:e})")]
    MaxIterations { max_iter: usize, last_distance: f64 },

    #[error("optimizer failure: {0}")]
    Optimizer(String),

    #[error("I/O error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidArgument(msg()))
    }
}

pub(crate) fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

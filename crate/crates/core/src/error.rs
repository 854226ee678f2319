use std::path::PathBuf;

use crate::numerics::Spectrum;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller supplied arguments outside an operation's preconditions.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("eigenvalue iteration did not converge after {iterations} QR sweeps ({} of {dimension} eigenvalues found)", partial.eigenvalues.len())]
    EigenNonConvergence {
        iterations: usize,
        dimension: usize,
        partial: Spectrum,
    },

    #[error(
        "power iteration did not converge after {iterations} iterations (residual {residual:e})"
    )]
    StationaryNonConvergence {
        iterations: usize,
        residual: f64,
        last_iterate: Vec<f64>,
    },

    /// Training produced a NaN or infinite loss.
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss {
        step: usize,
        loss: f64,
        parameter_norms: Vec<(String, f64)>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of an iterative numerical procedure or of training itself.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::EigenNonConvergence { .. }
                | Error::StationaryNonConvergence { .. }
                | Error::NonFiniteLoss { .. }
        )
    }
}

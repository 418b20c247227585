use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("cannot reshape {from:?} ({from_len} elements) into {to:?} ({to_len} elements)")]
    ExtentMismatch {
        from: Vec<usize>,
        from_len: usize,
        to: Vec<usize>,
        to_len: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("SVD of a {rows}x{cols} matrix did not converge after {sweeps} sweeps")]
    SvdNoConvergence { rows: usize, cols: usize, sweeps: usize },

    #[error("Haar transform needs even spatial extents, got {height}x{width}; reflect-pad the input first")]
    OddExtent { height: usize, width: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("truncated file {path}: expected {expected} bytes of payload, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("unknown dtype code {0}")]
    UnknownDtype(u32),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("malformed noise config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("training diverged at epoch {epoch}, step {step}")]
    Divergence { epoch: usize, step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for failures of the numerics (as opposed to bad input data).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::SvdNoConvergence { .. } | Error::Divergence { .. }
        )
    }
}

pub(crate) fn ensure_shape(expected: &[usize], found: &[usize]) -> Result<()> {
    if expected != found {
        return Err(Error::ShapeMismatch {
            expected: expected.to_vec(),
            found: found.to_vec(),
        });
    }
    Ok(())
}

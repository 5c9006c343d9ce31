//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
///
/// Numerical routines report structured conditions (convergence, non-finite
/// values) rather than panicking; panics are reserved for internal invariant
/// violations that indicate a bug in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible shapes in a matrix product, concatenation, or similar.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A NaN or infinity where a finite value is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// The Jacobi SVD sweep limit was exhausted before convergence.
    #[error(
        "SVD did not converge for a {rows}x{cols} matrix after {sweeps} sweeps \
         (worst remaining column-pair cosine {worst_cosine:.3e})"
    )]
    SvdConvergence {
        rows: usize,
        cols: usize,
        sweeps: usize,
        worst_cosine: f64,
    },

    /// A caller-supplied argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A batch violates the labeled-partition contract (empty class, missing
    /// domain, label out of range, ...).
    #[error("batch partition: {0}")]
    Partition(String),

    /// A data file failed to parse; `line` is 1-based and includes the header.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    /// Filesystem failure while reading or writing an artifact.
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Training stopped early; carries the last observed state so callers can
    /// inspect what went wrong.
    #[error("training aborted in {stage} stage at epoch {epoch}: {reason}")]
    TrainingAbort {
        stage: &'static str,
        epoch: usize,
        reason: String,
    },
}

impl Error {
    /// Convenience constructor for I/O errors tagged with the offending path.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

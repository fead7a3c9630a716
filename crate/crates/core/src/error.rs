use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration or input value violates an invariant. `field` is the
    /// dotted path of the offending setting (e.g. `quantizer.K`).
    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: String, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed metadata in {path}: {reason}")]
    Metadata { path: PathBuf, reason: String },

    #[error("shape/payload mismatch in {path}: expected {expected} bytes, found {found}")]
    ShapeMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("unsupported dtype `{0}`")]
    UnsupportedDtype(String),

    #[error("tensor contains non-finite values")]
    NonFinite,

    #[error("matrix is not Hermitian (max asymmetry {0:.3e})")]
    NotHermitian(f64),

    #[error("matrix is not positive semidefinite (pivot {0:.3e})")]
    NotPsd(f64),

    #[error("matrix is singular even after diagonal loading")]
    Singular,

    #[error("no spectral peak above threshold")]
    NoPeak,

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged {
        epoch: usize,
        last_good: Box<crate::nn::ModelState>,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("empty selection: {0}")]
    Empty(String),
}

impl Error {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Invalid { .. } | Error::UnsupportedDtype(_) | Error::Shape(_)
        )
    }
}

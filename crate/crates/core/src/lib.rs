//! Anomaly expert: object-aware abnormality matching over frozen visual
//! encoder tokens, suspicious-token selection, image-level scoring and
//! indication-prompt assembly, plus its training loop, evaluation harness
//! and the data-collection cleaning logic.
//!
//! Features arrive pre-extracted (see [`features`]); at desk scale they are
//! produced by a seeded planted-anomaly generator.

pub mod autodiff;
pub mod eval;
pub mod expert;
pub mod features;
pub mod ltfm;
pub mod params;
pub mod pipeline;
pub mod scoring;
pub mod selector;
pub mod training;

use std::path::PathBuf;

use thiserror::Error;

pub use autodiff::{AutodiffError, Real, Tape, Tensor, Var};
pub use expert::{ExpertModel, Inference};
pub use features::{CropLayout, FeatureBundle, FormatError, Label};
pub use params::{ExpertConfig, ExpertParams};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{path}: {source}")]
    Format { path: PathBuf, source: FormatError },
    #[error(transparent)]
    RawFormat(#[from] FormatError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Manifest { path: PathBuf, line: usize, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

/// Coarse error classes, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Usage,
            Error::Numeric(_)
            | Error::Autodiff(
                AutodiffError::NonFinite { .. } | AutodiffError::DegenerateVector { .. } | AutodiffError::DegenerateWeights,
            ) => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

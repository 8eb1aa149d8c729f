//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration (bad hyperparameter, wrong
    /// dimension, missing file).
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    /// A gradient or loss became NaN/Inf during training.
    #[error("non-finite gradient at step {step} (instance {instance:?})")]
    NonFiniteGradient { step: usize, instance: Option<usize> },

    /// The co-state recursion blew up; usually the inner learning rate is too
    /// large for the unroll horizon.
    #[error("co-state norm {norm:e} exceeded limit at step {step}")]
    UnstableCoState { step: usize, norm: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Correlation with zero rank variance in one argument.
    #[error("correlation undefined: zero rank variance")]
    UndefinedCorrelation,

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFiniteGradient { .. }
            | Error::UnstableCoState { .. }
            | Error::Numerical(_)
            | Error::UndefinedCorrelation => true,
            Error::Stage { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

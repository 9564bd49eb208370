use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BemError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training error at step {step}: {msg}")]
    Training { step: usize, msg: String },

    /// Raised by the optimizer before any parameter is touched.
    #[error("non-finite gradient in tensor `{tensor}`")]
    NonFiniteGradient { tensor: String },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("numerical domain error: {0}")]
    Domain(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("model file: {0}")]
    ModelFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl BemError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        BemError::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        BemError::Config(msg.into())
    }

    pub(crate) fn eval(msg: impl Into<String>) -> Self {
        BemError::Eval(msg.into())
    }

    /// True for failures caused by the numbers themselves rather than by
    /// inputs or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            BemError::Training { .. } | BemError::NonFiniteGradient { .. } | BemError::Domain(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, BemError>;

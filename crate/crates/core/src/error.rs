use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GraftError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GraftError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("validation error at row {row}: {message}")]
    Validation { row: usize, message: String },

    #[error("parse error at row {row}, column `{column}`: cannot read `{value}` as a number")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("model file error: {0}")]
    ModelFile(String),
}

impl GraftError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GraftError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input or configuration, as opposed to
    /// failures that happen while computing.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            GraftError::Schema(_)
                | GraftError::Validation { .. }
                | GraftError::Parse { .. }
                | GraftError::Config(_)
                | GraftError::Shape(_)
                | GraftError::ModelFile(_)
        )
    }
}

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid parameter `{field}`: {reason}")]
    Parameter { field: String, reason: String },

    #[error("hypothesis violated: {0}")]
    Hypothesis(String),

    #[error("matrix is rank deficient (rank {rank} of {dim})")]
    RankDeficient { rank: usize, dim: usize },

    #[error("point is not on the Stiefel manifold (|V'V - I|_F = {residual:e})")]
    Infeasible { residual: f64 },

    #[error("direction is not a descent direction (<grad, dir> = {0:e})")]
    NotDescent(f64),

    #[error("empty dataset")]
    EmptyData,

    #[error("non-finite value at row {row}, column {column}")]
    NonFinite { row: usize, column: usize },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("feature `{0}` has zero variance in the source sample")]
    ZeroVariance(String),

    #[error("unknown dataset recipe `{0}`")]
    UnknownRecipe(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("unsupported format `{found}` (expected `{expected}`)")]
    Format { expected: String, found: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn param(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Parameter {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn dim(
        context: &'static str,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::Dimension {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

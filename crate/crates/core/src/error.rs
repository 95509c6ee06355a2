use std::path::PathBuf;

use thiserror::Error;

use crate::attribute::Category;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An operation was called with arguments outside its contract.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    /// A dataset file violates its schema.
    #[error("ingestion error in record {index}, field `{field}`: {reason}")]
    Ingestion {
        index: usize,
        field: String,
        reason: String,
    },

    #[error("scoring error: {0}")]
    Scoring(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("prompt error: {0}")]
    Prompt(String),

    /// The backend could not be reached or kept failing after all retries.
    #[error("gateway error ({endpoint}): {reason}")]
    Gateway { endpoint: String, reason: String },

    /// The backend answered, but the answer does not honor the wire contract.
    #[error("protocol error ({endpoint}): {reason}")]
    Protocol { endpoint: String, reason: String },

    #[error("image error for {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn missing_category(index: usize, category: Category) -> Self {
        Error::Ingestion {
            index,
            field: format!("attributes.{}", category.key()),
            reason: format!("missing required category {category}"),
        }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_)
            | Error::Config(_)
            | Error::Validation(_)
            | Error::Ingestion { .. }
            | Error::Scoring(_)
            | Error::Evaluation(_)
            | Error::Prompt(_) => 2,
            Error::Gateway { .. } => 3,
            Error::Protocol { .. } => 4,
            Error::Image { .. } | Error::Io { .. } | Error::Json(_) | Error::Csv(_) => 1,
        }
    }
}

use std::path::PathBuf;

/// Errors raised by the motif pipeline.
#[derive(Debug, thiserror::Error)]
pub enum MotifError {
    /// An argument outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// Tensor or sequence shapes that do not fit together.
    #[error("shape error: {0}")]
    Shape(String),
    /// Inconsistent benchmark, split or model configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// A file on disk could not be decoded.
    #[error("parse error in {record}: {reason}")]
    Parse { record: String, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    /// Results are missing for part of the evaluation set.
    #[error("incomplete results: {0}")]
    Incomplete(String),
}

pub type Result<T> = std::result::Result<T, MotifError>;

impl MotifError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(record: impl Into<String>, reason: impl ToString) -> Self {
        Self::Parse {
            record: record.into(),
            reason: reason.to_string(),
        }
    }
}

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("softmax over an empty set")]
    EmptySet,

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("value does not belong to this tape")]
    ForeignValue,

    #[error("backward already ran on this tape")]
    BackwardTwice,

    #[error("{what} index {index} out of range (size {len})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("invalid data in {source_name}: {detail}")]
    Data { source_name: String, detail: String },

    #[error("evaluation mask selects no entries")]
    EmptyEvalMask,

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("cannot access {path}")]
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

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn data(source_name: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Data {
            source_name: source_name.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (as opposed to failures
    /// during an otherwise valid run).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Shape { .. }
                | Error::OutOfRange { .. }
                | Error::Invalid(_)
                | Error::Data { .. }
                | Error::EmptyEvalMask
                | Error::Io { .. }
                | Error::Csv(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

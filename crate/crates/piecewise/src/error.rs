use thiserror::Error;

/// Errors surfaced by the library.
///
/// Contract violations (caller handed us something the API forbids) are kept
/// distinct from numerical failures (a computation produced a non-finite
/// value) so the CLI can map them to different exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at {context}: {detail}")]
    ShapeMismatch { context: String, detail: String },

    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("no label-complete subset exists in the given set")]
    NoLabelCompleteSubset,

    #[error("invalid IDX file {path} at offset {offset}: {detail}")]
    IdxFormat {
        path: String,
        offset: usize,
        detail: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("training aborted: {0}")]
    TrainAbort(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn shape(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

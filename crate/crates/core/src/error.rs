use thiserror::Error;

use crate::checkpoint::CheckpointError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset for domain {domain} is empty after filtering")]
    EmptyDataset { domain: String },

    #[error("user {user} has {len} interactions; at least {min} are required")]
    SequenceTooShort { user: String, len: usize, min: usize },

    #[error("user {user} has only {available} non-interacted items, {requested} negatives requested")]
    InsufficientCandidates {
        user: String,
        available: usize,
        requested: usize,
    },

    #[error("item {0} has no title in the catalog")]
    MissingTitle(u32),

    #[error("unknown item id {0}")]
    UnknownItem(u32),

    #[error("empty prefix")]
    EmptyPrefix,

    #[error("{file}:{line}: {message}")]
    Parse { file: String, line: usize, message: String },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("merge coefficients sum to {sum}, expected 1")]
    LambdaSum { sum: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("mismatched reports: {0}")]
    ReportMismatch(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("degenerate batch: train-mode batch norm needs at least 2 valid rows, got {0}")]
    DegenerateBatch(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no valid frames under the mask")]
    EmptyMask,
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (videos: {videos:?})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        videos: Vec<String>,
    },
    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },
    #[error("truncated payload in {path}: expected {expected} bytes, found {actual}")]
    Length {
        path: String,
        expected: usize,
        actual: usize,
    },
    #[error("corpus error: {0}")]
    Corpus(String),
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("index out of range: {0}")]
    Bounds(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

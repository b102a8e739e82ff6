use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure surfaced by the library.
///
/// Variants are grouped by the stage that raises them; [`Error::is_user_error`]
/// separates bad input or configuration from internal faults.
#[derive(Debug, Error)]
pub enum Error {
    // record validation
    #[error("missing field `{0}`")]
    MissingField(String),
    #[error("field `{field}`: sentiment {value} outside [-1, 1]")]
    ScoreOutOfRange { field: String, value: String },
    #[error("field `{0}`: headline is empty after whitespace normalization")]
    EmptyHeadline(String),
    #[error("field `{field}`: cannot parse `{value}` as a UTC timestamp")]
    BadTimestamp { field: String, value: String },

    // ingest
    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),
    #[error("{}: parse error at line {line}: {message}", path.display())]
    ParseError {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("column `{0}` not present in header")]
    MissingColumn(String),
    #[error("degenerate split: {partition} would be empty for n = {n}")]
    DegenerateSplit { partition: &'static str, n: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    // tokenizer
    #[error("cannot train a vocabulary from an empty corpus")]
    CorpusEmpty,
    #[error("vocabulary file: {0}")]
    BadVocab(String),

    // tensors and autodiff
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value produced by {0}")]
    NonFiniteValue(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalarLoss(Vec<usize>),
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("checkpoint: {0}")]
    BadCheckpoint(String),

    // models
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    IdOutOfRange { id: u32, vocab_size: usize },
    #[error("batch row {0} contains only padding")]
    AllPadRow(usize),
    #[error("no precomputed embedding for headline hash {0}")]
    MissingEmbedding(String),

    // training and evaluation
    #[error("length mismatch: {0} predictions vs {1} targets")]
    LengthMismatch(usize, usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("split `{0}` is empty")]
    EmptySplit(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    // cli
    #[error("{what} hash mismatch: expected {expected}, found {found}")]
    ConfigHashMismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error("{}: {source}", path.display())]
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
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::FileNotFound(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// True for errors caused by input data or configuration (exit code 2).
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::MissingField(_)
                | Error::ScoreOutOfRange { .. }
                | Error::EmptyHeadline(_)
                | Error::BadTimestamp { .. }
                | Error::FileNotFound(_)
                | Error::ParseError { .. }
                | Error::MissingColumn(_)
                | Error::DegenerateSplit { .. }
                | Error::InvalidConfig(_)
                | Error::CorpusEmpty
                | Error::BadVocab(_)
                | Error::BadCheckpoint(_)
                | Error::EmptySplit(_)
                | Error::ConfigHashMismatch { .. }
                | Error::Csv(_)
        )
    }
}

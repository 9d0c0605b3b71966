use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// Variants are grouped by the module that raises them; [`Error::kind`]
/// buckets them for the CLI exit-code contract.
#[derive(Debug, Error)]
pub enum Error {
    // numerics
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by {0}")]
    NonFiniteValue(String),
    #[error("backward root must be a scalar, got shape {0:?}")]
    NotScalarRoot(Vec<usize>),
    #[error("backward root was not produced by this tape")]
    DetachedRoot,
    #[error("step {step} outside schedule range 0..={total}")]
    StepOutOfRange { step: usize, total: usize },

    // data
    #[error("column {name} (index {index}) missing from header of width {width}")]
    MissingColumn { name: &'static str, index: usize, width: usize },
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("file is empty: {0}")]
    EmptyFile(PathBuf),
    #[error("scores have zero variance")]
    DegenerateVariance,
    #[error("too few items: {0}")]
    TooFew(String),
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,

    // encoder / checkpoint
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    IdOutOfRange { id: usize, vocab_size: usize },
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint version {found} not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    // models
    #[error("every position is masked")]
    AllMasked,
    #[error("pooled vector has zero norm")]
    ZeroVector,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty input")]
    Empty,

    // trainer
    #[error("too few training examples: have {have}, need at least {need}")]
    TooFewExamples { have: usize, need: usize },

    // strategies / eval
    #[error("segment index mismatch at position {position}: {left} vs {right}")]
    IndexMismatch { position: usize, left: usize, right: usize },
    #[error("parallel corpus has {have} pairs, {need} requested")]
    CorpusTooSmall { have: usize, need: usize },
    #[error("training set is empty; max observed z-score undefined")]
    EmptyTrain,
    #[error("duplicate segment index {index} at line {line}")]
    DuplicateIndex { index: usize, line: usize },
}

/// Coarse failure class, used to pick CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Runtime,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure { path: path.into(), source }
    }

    pub fn malformed(line: usize, reason: impl Into<String>) -> Self {
        Error::MalformedRow { line, reason: reason.into() }
    }

    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            InvalidConfig(_) | VersionMismatch { .. } | CorruptCheckpoint(_) => ErrorKind::Config,
            MissingColumn { .. }
            | MalformedRow { .. }
            | EmptyFile(_)
            | DegenerateVariance
            | TooFew(_)
            | EmptyCorpus
            | IoFailure { .. }
            | LengthMismatch { .. }
            | Empty
            | TooFewExamples { .. }
            | IndexMismatch { .. }
            | CorpusTooSmall { .. }
            | EmptyTrain
            | DuplicateIndex { .. }
            | SequenceTooLong { .. }
            | IdOutOfRange { .. } => ErrorKind::Data,
            ShapeMismatch(_)
            | NonFiniteValue(_)
            | NotScalarRoot(_)
            | DetachedRoot
            | StepOutOfRange { .. }
            | AllMasked
            | ZeroVector => ErrorKind::Runtime,
        }
    }
}

use std::path::PathBuf;

use crate::corpus::Label;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: header mismatch: expected `{expected}`, found `{found}`")]
    Header {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{path}: row {row}: {message}")]
    MalformedRow {
        path: PathBuf,
        row: u64,
        message: String,
    },
    #[error("unknown category `{name}`{}", row.map(|r| format!(" at row {r}")).unwrap_or_default())]
    UnknownCategory { name: String, row: Option<u64> },
    #[error("duplicate instance id `{0}`")]
    DuplicateId(String),
    #[error("dataset is partially labeled: instance `{0}` has no label")]
    PartiallyLabeled(String),
    #[error("invalid fold count {0}; need at least 2")]
    InvalidFoldCount(usize),
    #[error("class {label} has {count} instances, fewer than k = {k}")]
    ClassTooSmall { label: Label, count: usize, k: usize },
    #[error("vocabulary of {vocab_size} words is too small for {classes} classes")]
    VocabTooSmall { vocab_size: usize, classes: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite gradient in tensor {tensor}")]
    NonFiniteGradient { tensor: usize },
    #[error("step {step} outside schedule range 0..={total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("position {position} out of range for sequence length {len}")]
    PositionOutOfRange { position: usize, len: usize },
    #[error("empty selection: no positions to score")]
    EmptySelection,
    #[error("invalid template: {0}")]
    InvalidTemplate(String),
    #[error("verbalizer word `{0}` is not a single vocabulary token")]
    VerbalizerWord(String),
    #[error("label {0} is not in the model's class list")]
    ClassNotInList(Label),
    #[error("training data has no {0} instances")]
    MissingClass(Label),
    #[error("instance `{0}` has no label")]
    Unlabeled(String),
    #[error("mismatched class lists")]
    ClassListMismatch,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

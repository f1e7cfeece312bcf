use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("{op}: axis {axis} invalid for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("clamp bounds inverted: lo {lo} > hi {hi}")]
    InvalidClamp { lo: f64, hi: f64 },

    #[error("token id {token} outside vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: usize, vocab_size: usize },

    #[error("sequence length {len} exceeds context length {context_len}")]
    SequenceTooLong { len: usize, context_len: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("model configurations differ: {0}")]
    ConfigMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("line {line}: {message}")]
    Jsonl { line: usize, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("sample {index} in an SFT batch is labelled undesirable")]
    UndesirableInSft { index: usize },

    #[error("dataset has no desirable/undesirable pairs")]
    EmptyPairing,

    #[error("token weights misaligned for sample {sample_index}: {expected} target tokens, {found} weights")]
    WeightMisaligned {
        sample_index: usize,
        expected: usize,
        found: usize,
    },

    #[error("{what}: length {left} does not match {right}")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("sample {index} has no analysis metadata")]
    MissingMeta { index: usize },

    #[error("dataset contains only {0} samples; contrastive training needs both labels")]
    SingleLabel(&'static str),

    #[error("objective {objective} cannot train on this dataset: {reason}")]
    ObjectiveDataset {
        objective: &'static str,
        reason: String,
    },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("attempted to update frozen model")]
    FrozenModel,

    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("clamp range ({lo}, {hi}): {source}")]
    SweepRange {
        lo: f64,
        hi: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Whether the caller (config, data, files) is at fault rather than the
    /// library.
    pub fn is_user_error(&self) -> bool {
        match self {
            Error::DataLength { .. }
            | Error::ShapeMismatch { .. }
            | Error::NotScalar(_)
            | Error::InvalidAxis { .. }
            | Error::NonFiniteLoss { .. }
            | Error::FrozenModel
            | Error::Io(_) => false,
            Error::Stage { source, .. } | Error::SweepRange { source, .. } => {
                source.is_user_error()
            }
            _ => true,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}

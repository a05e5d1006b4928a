//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: malformed record: {detail}")]
    MalformedLine {
        path: String,
        line: usize,
        detail: String,
    },

    #[error("{path}:{line}: schema error: {detail}")]
    Schema {
        path: String,
        line: usize,
        detail: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("duplicate passage id {id:?} in corpus")]
    DuplicatePassageId { id: String },

    #[error("empty text cannot be processed")]
    EmptyText,

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("hypothesis does not fit: {needed} tokens needed for the hypothesis and prompt frame, only {max_len} available")]
    HypothesisDoesNotFit { needed: usize, max_len: usize },

    #[error("nothing to predict: no position was masked")]
    NothingMasked,

    #[error("sequence of {len} tokens exceeds the model maximum {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },

    #[error("token id {id} out of vocabulary range {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("empty training set: {0}")]
    EmptyTrainingSet(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unknown query id {id:?} in relevance map")]
    UnknownQueryId { id: String },

    #[error("query {id:?} has no relevant passages")]
    NoRelevantPassages { id: String },

    #[error("scorer failed on pair (premise={premise:?}, hypothesis={hypothesis:?}): {detail}")]
    ScorerFailure {
        premise: String,
        hypothesis: String,
        detail: String,
    },

    #[error("invalid config:\n{}", violations.join("\n"))]
    ConfigInvalid { violations: Vec<String> },

    #[error("stage {stage:?}: missing input {path:?} (expected from stage {producer:?})")]
    MissingArtifact {
        stage: String,
        producer: String,
        path: String,
    },

    #[error("run directory {path:?} is locked by another pipeline run")]
    RunLocked { path: String },

    #[error("pipeline error: {0}")]
    Pipeline(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable tag for this error, used by the CLI's
    /// JSON error channel.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MalformedLine { .. } => "malformed_line",
            Error::Schema { .. } => "schema",
            Error::Io { .. } => "io",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::DuplicatePassageId { .. } => "duplicate_passage_id",
            Error::EmptyText => "empty_text",
            Error::Vocabulary(_) => "vocabulary",
            Error::HypothesisDoesNotFit { .. } => "hypothesis_does_not_fit",
            Error::NothingMasked => "nothing_masked",
            Error::SequenceTooLong { .. } => "sequence_too_long",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::EmptyTrainingSet(_) => "empty_training_set",
            Error::Checkpoint(_) => "checkpoint",
            Error::UnknownQueryId { .. } => "unknown_query_id",
            Error::NoRelevantPassages { .. } => "no_relevant_passages",
            Error::ScorerFailure { .. } => "scorer_failure",
            Error::ConfigInvalid { .. } => "config_invalid",
            Error::MissingArtifact { .. } => "missing_artifact",
            Error::RunLocked { .. } => "run_locked",
            Error::Pipeline(_) => "pipeline",
        }
    }
}

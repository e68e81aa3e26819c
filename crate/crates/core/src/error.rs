use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("trace contains no non-delimiter token")]
    EmptyTrace,
    #[error("final step is not of the form [ANS, choice, <end_of_step>]: {0}")]
    MalformedAnswer(String),
    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("stream timestamps are not sorted at position {0}")]
    UnsortedStream(usize),
    #[error("encoding dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("visual stream is empty")]
    EmptyVisualStream,
    #[error("fused sequence is empty")]
    EmptyFusedSequence,
    #[error("infeasible environment config: {0}")]
    InfeasibleConfig(String),
    #[error("enumeration exceeded budget of {0} leaves")]
    BudgetExceeded(u64),
    #[error("parameters contain non-finite entries")]
    NonFiniteParameters,
    #[error("token {token} not allowed by grammar at position {position}")]
    GrammarViolation { position: usize, token: String },
    #[error("value head queried on a prefix that does not end at a step boundary")]
    MisalignedPrefix,
    #[error("no alternative step found after {0} attempts")]
    NoAlternativeFound(usize),
    #[error("preference pair branches do not share a prefix")]
    PrefixMismatch,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("training diverged at update {0}: loss is not finite")]
    DivergedTraining(usize),
    #[error("no episode was retained for preference collection")]
    EmptyDataset,
    #[error("unknown token surface {0:?}")]
    UnknownToken(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

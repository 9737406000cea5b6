//! Shared error type for the lab.

/// Error type covering every fallible operation in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Token id outside the vocabulary range.
    #[error("invalid token id {id}: vocabulary has {vocab_size} symbols")]
    InvalidToken { id: usize, vocab_size: usize },
    /// Text that cannot be segmented into vocabulary symbols.
    #[error("cannot tokenize input at byte {position} near {snippet:?}")]
    Tokenize { position: usize, snippet: String },
    /// An argument violated an operation precondition.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    /// A configuration field violated an invariant.
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    /// Dataset generation could not satisfy its postconditions.
    #[error("dataset generation failed: {0}")]
    Generation(String),
    /// A persisted dataset line failed to parse.
    #[error("dataset parse error at line {line}: {message}")]
    DatasetParse { line: usize, message: String },
    /// A group violated the GRPO group contract.
    #[error("invalid group: {0}")]
    InvalidGroup(String),
    /// Mismatched matrix or batch shapes.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    /// DoRA direction column with a vanishing norm.
    #[error("singular direction column {column}: norm {norm:.3e} is below 1e-12")]
    SingularColumn { column: usize, norm: f64 },
    /// Evaluation over an empty dataset.
    #[error("empty evaluation set")]
    EmptyEvalSet,
    /// Training produced a non-finite loss.
    #[error("non-finite loss {value} at step {step}; aborting")]
    NonFiniteLoss { step: u64, value: f64 },
    /// A checkpoint file did not match the expected layout.
    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),
    /// A metrics record failed to parse.
    #[error("metrics parse error at line {line}: {message}")]
    MetricsParse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad configuration or bad input files,
    /// as opposed to runtime failures. The CLI maps this to exit code 1.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidParameter(_)
                | Error::InvalidConfig(_)
                | Error::InvalidToken { .. }
                | Error::Tokenize { .. }
                | Error::DatasetParse { .. }
                | Error::MetricsParse { .. }
        )
    }
}

/// Result alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

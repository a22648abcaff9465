//! Crate-wide error type.
//!
//! Every fallible public operation returns [`Result`]. Variants are grouped
//! roughly by the stage that raises them: data loading, model math, template
//! handling, metrics, configuration, and checkpoint I/O.

use thiserror::Error;

/// Unified error type for the whole crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A data file could not be parsed. `line` is 1-based.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// An operation that needs at least one example received none.
    #[error("corpus is empty")]
    EmptyCorpus,

    /// A sentence with zero tokens was passed where content is required.
    #[error("sentence is empty")]
    EmptySentence,

    /// A token id is outside the vocabulary it is used with.
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    /// Constrained segmentation has no admissible path.
    #[error("no segmentation satisfies the protected-span constraints")]
    InfeasibleConstraints,

    /// A segment longer than the model's maximum duration was scored.
    #[error("segment length {len} exceeds maximum duration {max}")]
    DurationOverflow { len: usize, max: usize },

    /// A loss or gradient became NaN or infinite.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Sampling was requested from a pool with no templates.
    #[error("template pool is empty")]
    EmptyPool,

    /// Decoding was driven past the end of its template.
    #[error("decode position {pos} outside template of total duration {total}")]
    TemplateExhausted { pos: usize, total: usize },

    /// A response length does not match the template's total duration.
    #[error("response length {len} does not match template duration {total}")]
    TemplateMismatch { len: usize, total: usize },

    /// A metric has no defined value for the given inputs.
    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    /// A configuration value is out of its legal range.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A checkpoint file does not start with the expected magic bytes.
    #[error("not a checkpoint file (bad magic)")]
    Format,

    /// A checkpoint was written by an unsupported format version.
    #[error("unsupported checkpoint version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },

    /// A checkpoint's manifest and payload disagree.
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    /// An underlying I/O failure, annotated with the path involved.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A child error annotated with where in a larger procedure it arose
    /// (an example index, an adversarial iteration, ...).
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Wrap an I/O error with the path that produced it.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Shorthand for a parse failure at a 1-based line number.
    pub fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { line, msg: msg.into() }
    }

    /// Annotate a child error with the place it occurred.
    pub fn context(context: impl Into<String>, source: Error) -> Self {
        Error::Context { context: context.into(), source: Box::new(source) }
    }

    /// The innermost error, unwrapping any context layers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

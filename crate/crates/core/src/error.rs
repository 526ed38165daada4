use thiserror::Error;

/// Crate-wide error type. Every fallible public operation returns one of
/// these variants so callers (and the CLI) can map failures to exit codes
/// without string matching.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or out-of-range configuration. Carries the offending key
    /// and the 1-based line number when the source was a config file.
    #[error("config error at line {line}, key `{key}`: {msg}")]
    Config { key: String, line: usize, msg: String },

    /// Two tensors (or a tensor and an expectation) disagree on shape.
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    /// Numerically invalid input: NaN/Inf, probability mass off by more
    /// than tolerance, labels out of range, and similar.
    #[error("invalid input: {0}")]
    Input(String),

    /// A container or CSV file failed structural validation.
    #[error("format error in `{name}`: {msg}")]
    Format { name: String, msg: String },

    /// Operation called in the wrong order (backward before forward,
    /// estimate before train, resume into a different config).
    #[error("invalid state: {0}")]
    State(String),

    /// Training or attack produced a non-finite value. Names the tensor
    /// or parameter that first went bad.
    #[error("non-finite value in `{what}` at step {step}")]
    Divergence { what: String, step: usize },

    /// Fewer samples than an operation needs (selection produced nothing,
    /// batch below the estimator minimum).
    #[error("batch too small: need {need}, got {got} ({context})")]
    BatchTooSmall {
        need: usize,
        got: usize,
        context: String,
    },

    /// Stored artifact does not match what the caller expects (magic,
    /// version, config hash).
    #[error("version mismatch: {0}")]
    Version(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(key: &str, line: usize, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.to_string(),
            line,
            msg: msg.into(),
        }
    }

    pub fn shape(context: &str, expected: &[usize], got: &[usize]) -> Self {
        Error::Shape {
            context: context.to_string(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    pub fn format(name: &str, msg: impl Into<String>) -> Self {
        Error::Format {
            name: name.to_string(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An invalid configuration value.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed or out-of-range input data. `row` is the 1-based line or
    /// batch-row index the problem was detected at.
    #[error("bad data at row {row}: {msg}")]
    Data { row: usize, msg: String },

    /// An API contract was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A gradient or loss stopped being finite. `what` names the tensor or step.
    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

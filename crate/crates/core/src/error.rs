use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A tensor extent does not match what the operation requires.
    #[error("dimension mismatch in {op} on axis {axis}: expected {expected}, got {got}")]
    Dim {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("shape error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("{what} must be divisible by {divisor}, got {value}")]
    Divisibility { what: String, divisor: usize, value: usize },

    #[error("index out of range in {op}: row {row} holds {value}, bound is {bound}")]
    Index {
        op: &'static str,
        row: usize,
        value: usize,
        bound: usize,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, msg: impl Into<String>) -> Error {
    Error::Shape { op, msg: msg.into() }
}

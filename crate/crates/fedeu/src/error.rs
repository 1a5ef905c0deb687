use std::path::PathBuf;

/// Unified error type for the simulator.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes are incompatible with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// An operation produced a non-finite value, or numeric preconditions failed.
    #[error("numeric error in `{op}`: {msg}")]
    Numeric { op: String, msg: String },

    /// An API contract was violated (e.g. backward on a consumed tape).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration; the message names the offending field.
    #[error("config error: {0}")]
    Config(String),

    /// Labels are not valid one-hot / class encodings.
    #[error("label error: {0}")]
    Label(String),

    /// Argument outside a mathematical function's domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Client/server schema mismatch during aggregation.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Malformed container file; offset is the byte position of the failure.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// Underlying I/O failure, annotated with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn numeric(op: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Numeric {
            op: op.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config, 3 numeric, 4 I/O, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numeric { .. } | Error::Shape(_) | Error::Domain(_) | Error::Label(_) => 3,
            Error::Io { .. } | Error::Format { .. } => 4,
            Error::Contract(_) | Error::Protocol(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

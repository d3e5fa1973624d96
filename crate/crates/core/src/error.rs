use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or dimensions that cannot be combined.
    #[error("structural error: {0}")]
    Structural(String),

    /// A value outside the domain of an operation (division by zero, log of a
    /// nonpositive number, non-finite input).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("schema error: {0}")]
    Schema(String),

    /// The caller broke a protocol precondition (single-class metric input,
    /// non-deterministic objective, empty dataset, ...).
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u64, expected: u64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }

    /// Errors caused by bad user input rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Structural(_)
                | Error::Parse { .. }
                | Error::Schema(_)
                | Error::Version { .. }
                | Error::Config(_)
                | Error::Lookup(_)
        )
    }
}

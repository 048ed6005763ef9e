use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("sizing error: {0}")]
    Sizing(String),
    #[error("building placement saturated: {0}")]
    Placement(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("malformed file at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("version mismatch: expected {expected}, found {found}")]
    Version { expected: String, found: String },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code for the command-line tool: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            Error::Config(_) | Error::Unsupported(_) => 1,
            _ => 2,
        }
    }
}

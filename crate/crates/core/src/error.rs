use thiserror::Error;

/// Errors raised by the engines. Variants map onto the CLI exit codes:
/// configuration problems, numerical breakdowns and I/O failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("range error: {0}")]
    Range(String),
    #[error("state error: {0}")]
    State(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

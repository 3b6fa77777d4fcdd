use thiserror::Error;

/// Crate-wide error type. Variants are grouped by how the CLI maps them to
/// exit codes: validation problems (bad shapes, bad config, bad input files)
/// exit with 1, runtime failures (non-finite math, I/O) with 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    Runtime(String),
}

impl Error {
    /// True for errors caused by bad user input rather than a failure at runtime.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Shape(_) | Error::Config(_) | Error::Input(_) | Error::Parse(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

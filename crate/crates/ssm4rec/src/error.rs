use thiserror::Error;

/// Crate-wide error type. The CLI maps `is_validation` errors to exit
/// code 2 and everything else to exit code 3.
#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("dataset empty after filtering")]
    EmptyAfterFilter,

    #[error("training diverged at epoch {epoch}; last good checkpoint is from epoch {best_epoch}")]
    Diverged { epoch: usize, best_epoch: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("expectation mismatch: {0}")]
    Expect(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Dimension(_)
                | Error::Config(_)
                | Error::Index(_)
                | Error::Contract(_)
                | Error::Parse { .. }
                | Error::Format(_)
                | Error::Expect(_)
                | Error::EmptyAfterFilter
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

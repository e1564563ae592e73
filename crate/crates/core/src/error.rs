use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid design: {0}")]
    InvalidDesign(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid data at line {line}: {message}")]
    InvalidData { line: usize, message: String },

    #[error("invalid data: {0}")]
    InvalidDataset(String),

    #[error("not identified: {0}")]
    Unidentified(String),

    #[error("singular system ({what}): condition number {condition:.3e}")]
    Singular { what: &'static str, condition: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Numerical failures (as opposed to bad input) get their own exit status
    /// in the command-line tool.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Singular { .. })
    }
}

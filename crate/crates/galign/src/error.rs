//! Crate-wide error type. Variants are grouped so the CLI can map user
//! mistakes to exit code 1 and internal failures to exit code 2.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration: invalid sizes, unknown modes, mismatched shapes
    /// that trace back to user-provided settings.
    #[error("configuration error: {0}")]
    Config(String),

    /// Problems with input data (empty folders, undecodable files, ...).
    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    /// A loss term became non-finite during optimization.
    #[error("training aborted: non-finite value in term `{term}` at step {step}")]
    NonFiniteLoss { term: String, step: u64 },

    /// Checkpoint container could not be read or fails validation.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Numerical routine failed beyond its tolerance (e.g. matrix square
    /// root with strongly negative eigenvalues).
    #[error("numerical error: {0}")]
    Numerical(String),
}

impl Error {
    /// `true` for errors caused by user input rather than internal faults.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Data(_) | Error::Io(_) | Error::Image(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

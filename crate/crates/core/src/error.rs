use std::path::PathBuf;

/// Errors raised by every module in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Inconsistent shapes, dimensions or settings.
    #[error("configuration error: {0}")]
    Config(String),
    /// Input failed validation (bad label, empty corpus, wrong stage order, ...).
    #[error("validation error: {0}")]
    Validation(String),
    /// An operation was called outside its precondition.
    #[error("precondition violated: {0}")]
    Precondition(String),
    /// A record or file could not be decoded.
    #[error("format error: {0}")]
    Format(String),
    /// A structured file is missing a field or holds a bad value.
    #[error("invalid field `{field}` in {path}: {message}")]
    Field { path: PathBuf, field: String, message: String },
    /// Stored data was written by an incompatible format version.
    #[error("format version {found} in {path} is not supported (expected {expected}); migrate the file first")]
    Migration { path: PathBuf, found: u32, expected: u32 },
    /// A model response did not contain the expected pattern.
    #[error("could not parse response: {message}; raw response: {raw:?}")]
    Parse { message: String, raw: String },
    /// Claim generation produced too few items.
    #[error("generation failed: {message}; raw response: {raw:?}")]
    Generation { message: String, raw: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("request timed out after {0} s")]
    Timeout(u64),
    /// Loss or gradient became non-finite.
    #[error("numerical divergence at step {step}: {diagnostics}")]
    Divergence { step: u64, diagnostics: String },
    /// Too many episodes of a rollout batch failed.
    #[error("rollout batch aborted: {0}")]
    Aborted(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad input rather than a failed run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Validation(_)
                | Error::Precondition(_)
                | Error::Format(_)
                | Error::Field { .. }
                | Error::Migration { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or matrix shapes do not conform.
    #[error("dimension error: {0}")]
    Shape(String),

    /// A caller-supplied value violates a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{path}:{line}: {msg}")]
    Manifest { path: PathBuf, line: usize, msg: String },

    #[error("bad file format in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("backward already ran on this tape; run a new forward pass first")]
    TapeConsumed,

    #[error("zero-norm embedding")]
    ZeroNorm,

    #[error("non-finite loss at step {step} (batch: {batch})")]
    NonFiniteLoss { step: usize, batch: String },

    #[error("no voiced vowel frames in {0}")]
    NoVoicedVowels(&'static str),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// True for errors caused by bad user input rather than an internal fault.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Stage { source, .. } => source.is_validation(),
            Error::Shape(_)
            | Error::InvalidInput(_)
            | Error::Manifest { .. }
            | Error::Format { .. }
            | Error::ZeroNorm
            | Error::NoVoicedVowels(_) => true,
            _ => false,
        }
    }
}

/// Attach a pipeline stage tag to an error.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })
    }
}

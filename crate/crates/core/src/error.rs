use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("sample {sample}: {reason}")]
    Sample { sample: String, reason: String },
    #[error("schema version mismatch: dataset has version {found}, this build reads version {expected}")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("requested {requested} principal components but the centered data only has rank {achievable}")]
    RankDeficient { requested: usize, achievable: usize },
    #[error("basis mismatch: checkpoint was trained against basis {expected}, got {found}")]
    BasisMismatch { expected: String, found: String },
    #[error("non-finite loss at step {step}; last good checkpoint: {}", last_good.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    NonFinite { step: usize, last_good: Option<PathBuf> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Wav(#[from] hound::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn sample(sample: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Sample { sample: sample.into(), reason: reason.into() }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::RankDeficient { .. } | Error::BasisMismatch { .. } => 2,
            Error::NonFinite { .. } => 4,
            _ => 3,
        }
    }
}

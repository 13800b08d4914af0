use std::path::PathBuf;

/// Errors produced across the restoration pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("out-of-vocabulary token `{0}`")]
    OutOfVocabulary(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("non-finite guidance gradient at step t={step}")]
    NonFiniteGradient { step: usize },

    #[error("all body parts invisible, no guidance signal")]
    NoVisibleParts,

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("unrenderable humanoid: {0}")]
    Unrenderable(String),

    #[error("conflicting review marks for `{0}`")]
    ConflictingMarks(String),

    #[error("cannot write output directory {}: {source}", path.display())]
    OutputDir {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("io error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

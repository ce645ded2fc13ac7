use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("backward called before forward on {0}")]
    BackwardBeforeForward(&'static str),

    #[error("non-finite gradient in parameter '{param}'")]
    NonFiniteGrad { param: String },

    #[error("loss became non-finite at epoch {epoch}, step {step} ({which})")]
    NanLoss {
        epoch: usize,
        step: usize,
        which: String,
    },

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Core(#[from] pasyn_core::CoreError),
}

impl NnError {
    pub fn io(path: impl Into<std::path::PathBuf>, source: std::io::Error) -> Self {
        NnError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, NnError>;

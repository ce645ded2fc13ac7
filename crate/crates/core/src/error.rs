use thiserror::Error;

/// Errors produced by geometry, optics, transport, and pipeline operations.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unknown tissue class id {0}")]
    InvalidClassId(u8),

    #[error("wavelength {0} nm outside spectra grid [{1}, {2}] nm")]
    WavelengthOutOfGrid(f64, f64, f64),

    #[error("tissue class {0:?} present in label map but missing from optical spec")]
    MissingClassSpec(crate::tissue::TissueClass),

    #[error("label map contains no gel (class 4) voxel")]
    NoGelClass,

    #[error("invalid optical volume: {0}")]
    InvalidVolume(String),

    #[error("pool '{pool}' has {available} masks but config needs {needed}")]
    InsufficientPool {
        pool: String,
        available: usize,
        needed: usize,
    },

    #[error("unknown dataset config '{0}'")]
    UnknownConfig(String),

    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: std::path::PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    pub fn io(path: impl Into<std::path::PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;

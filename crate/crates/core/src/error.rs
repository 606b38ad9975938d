use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced anywhere in the localization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or buffer shapes that do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A scalar argument outside its admissible range.
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Spatial size not divisible by a stride, patch size or factor.
    #[error("shape error: {0}")]
    Shape(String),

    /// On-disk dataset or checkpoint content that cannot be interpreted.
    #[error("format error ({id}): {msg}")]
    Format { id: String, msg: String },

    /// Training produced a non-finite value.
    #[error("non-finite value in `{tensor}` at step {step}")]
    NonFinite { tensor: String, step: usize },

    /// Checkpoint written under a different configuration.
    #[error("checkpoint config hash {found} does not match expected {expected}")]
    CheckpointMismatch { expected: String, found: String },

    /// A failure inside a named pipeline stage.
    #[error("{module}: {source}")]
    Stage {
        module: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Safetensors(#[from] safetensors::SafeTensorError),
}

impl Error {
    /// Short machine-readable kind, used by the CLI error record and the C API.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Domain(_) => "domain",
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::Format { .. } => "format",
            Error::NonFinite { .. } => "non_finite",
            Error::CheckpointMismatch { .. } => "checkpoint_mismatch",
            Error::Stage { source, .. } => source.kind(),
            Error::Io { .. } => "io",
            Error::Tensor(_) => "tensor",
            Error::Image(_) => "image",
            Error::Json(_) => "json",
            Error::Safetensors(_) => "safetensors",
        }
    }

    /// Innermost pipeline stage the error was attributed to, if any.
    pub fn module(&self) -> Option<&'static str> {
        match self {
            Error::Stage { module, source } => source.module().or(Some(module)),
            _ => None,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

/// Attaches the name of the pipeline stage that failed.
pub(crate) trait StageExt<T> {
    fn stage(self, module: &'static str) -> Result<T>;
}

impl<T, E: Into<Error>> StageExt<T> for std::result::Result<T, E> {
    fn stage(self, module: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage { module, source: Box::new(e.into()) })
    }
}

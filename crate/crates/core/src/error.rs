use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("unsupported magnification {requested}x (base is {base}x)")]
    UnsupportedMagnification { requested: f64, base: f64 },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from bad input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Format(_)
                | Error::Invariant(_)
                | Error::UnsupportedMagnification { .. }
                | Error::Spec(_)
                | Error::Contract(_)
                | Error::Validation(_)
                | Error::Degenerate(_)
                | Error::Json(_)
        )
    }
}

impl From<png::DecodingError> for Error {
    fn from(e: png::DecodingError) -> Self {
        Error::Format(format!("png decode: {e}"))
    }
}

impl From<png::EncodingError> for Error {
    fn from(e: png::EncodingError) -> Self {
        Error::Format(format!("png encode: {e}"))
    }
}

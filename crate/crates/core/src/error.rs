use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand extents are incompatible with the operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A window geometry cannot tile the patch grid it was applied to.
    #[error("geometry error: {0}")]
    Geometry(String),

    /// Inconsistent model or run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Reflection padding needs each pad count to be smaller than the extent it mirrors.
    #[error("unsupported padding: pad {pad} on an axis of extent {extent}")]
    UnsupportedPadding { pad: usize, extent: usize },

    #[error("input too small: {0}")]
    InputTooSmall(String),

    /// Caller broke an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("unknown feature tap `{0}`")]
    UnknownTap(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    /// Malformed weights or image file.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("derivative order {order} is not supported by {activation}")]
    UnsupportedOrder { order: usize, activation: String },

    #[error("capability error: {0}")]
    Capability(String),

    #[error("grid mismatch: extent {extent} on axis {axis} is not a multiple of eps = {eps}")]
    GridMismatch { axis: usize, extent: f64, eps: f64 },

    #[error("invalid input: {0}")]
    Input(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by asking for more smoothness or depth than the
    /// network or the bound machinery provides.
    pub fn is_capability(&self) -> bool {
        matches!(self, Error::UnsupportedOrder { .. } | Error::Capability(_))
    }
}

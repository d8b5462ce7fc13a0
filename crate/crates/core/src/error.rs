//! Crate-wide error type and result alias.

use thiserror::Error;

/// Errors surfaced by simulation, rendering, training, and persistence.
///
/// Variants map onto the CLI exit-code classes: configuration problems,
/// data problems, and numeric failure. I/O wraps the source error.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {context} (got {got_rows}x{got_cols}, want {want_rows}x{want_cols})")]
    ShapeMismatch {
        context: &'static str,
        got_rows: usize,
        got_cols: usize,
        want_rows: usize,
        want_cols: usize,
    },

    /// No surface point of the scene is visible from the camera.
    #[error("camera sees no surface point of the scene")]
    EmptyView,

    /// A sampler was asked for more points than the cloud holds.
    #[error("requested {requested} points from a cloud of {available}")]
    InsufficientPoints { requested: usize, available: usize },

    #[error("dataset is empty or lacks required records: {0}")]
    EmptyDataset(String),

    #[error("unknown evaluation method `{0}`")]
    UnknownMethod(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    /// Non-finite values or divergence in a numeric routine.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Data(format!("serialization: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

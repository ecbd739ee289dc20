use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid box [{x1}, {y1}, {x2}, {y2}]: {reason}")]
    InvalidBox {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        reason: &'static str,
    },

    #[error("invalid detection: {0}")]
    InvalidDetection(String),

    #[error("raster shape {got_h}x{got_w} not accepted by this model (expects {want_h}x{want_w})")]
    DimensionMismatch {
        got_h: usize,
        got_w: usize,
        want_h: usize,
        want_w: usize,
    },

    #[error("detection loss requires at least one target")]
    EmptyTargets,

    #[error("target box [{x1}, {y1}, {x2}, {y2}] lies outside the {w}x{h} image")]
    TargetOutOfBounds {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        w: usize,
        h: usize,
    },

    #[error("architecture mismatch: `{left}` vs `{right}`")]
    ArchitectureMismatch { left: String, right: String },

    #[error("non-finite loss at epoch {epoch}, iteration {iteration}")]
    NonFiniteLoss { epoch: usize, iteration: usize },

    #[error("invalid config value at `{key}`: {reason}")]
    InvalidConfig { key: String, reason: String },

    #[error("failed to parse config {path}: {message}")]
    ConfigParse { path: PathBuf, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

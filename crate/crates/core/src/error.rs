//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor or operator was handed data of the wrong shape.
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    /// A dense materialization would exceed the entry budget.
    #[error("dense materialization too large: {rows} x {cols} exceeds {max_entries} entries")]
    SizeGuard {
        rows: usize,
        cols: usize,
        max_entries: usize,
    },

    /// Final activation cannot be inverted (e.g. relu).
    #[error("activation {0} is not invertible")]
    NonInvertibleActivation(String),

    /// An iterative solve produced a non-finite objective.
    #[error("solver diverged: non-finite objective at iteration {iteration}")]
    Divergence { iteration: usize },

    /// Empty input where at least one element is required.
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    /// Input whose statistics make the requested operation meaningless.
    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),

    /// Bad configuration value.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A pipeline stage failed; carries the stage name for reporting.
    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    /// Shape or config problem at a specific generator layer.
    #[error("layer {index}: {source}")]
    Layer {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    /// Byte-level format violation when decoding a tensor file.
    #[error("tensor format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Wrap an error with the pipeline stage it occurred in.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

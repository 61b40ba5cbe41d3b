use std::ops::Range;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("attention has no keys to attend to")]
    EmptyContext,

    #[error("out of bounds: {0}")]
    Bounds(String),

    #[error("incompatible anchor cache: {0}")]
    Compatibility(String),

    #[error("malformed container: {0}")]
    Format(String),

    #[error("segment {segment} (frames {frames:?}) failed: {source}")]
    Job {
        segment: usize,
        frames: Range<usize>,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("{op}: reduction axis is empty")]
    EmptyAxis { op: &'static str },

    #[error("layer norm over a single feature is degenerate")]
    DegenerateNormalization,

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("not a probability distribution: sums to {sum}")]
    NotADistribution { sum: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid bounding box ({x1}, {y1}, {x2}, {y2}): needs x1 < x2 and y1 < y2")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("invalid time span [{start}, {end}) for {len} frames")]
    InvalidSpan { start: usize, end: usize, len: usize },

    #[error("frame has no objects")]
    EmptyFrame,

    #[error("frame {frame}: {source}")]
    Frame {
        frame: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("instance {id}: field `{field}`: {message}")]
    Schema { id: String, field: String, message: String },

    #[error("instance {id}: dimension mismatch for {field}: expected {expected}, found {found}")]
    Dimension {
        id: String,
        field: String,
        expected: usize,
        found: usize,
    },

    #[error("loss component `{name}` is negative or non-finite: {value}")]
    InvalidLoss { name: &'static str, value: f64 },

    #[error("length mismatch: {left} predictions vs {right} ground truths")]
    LengthMismatch { left: usize, right: usize },

    #[error("configuration: {0}")]
    Config(String),

    #[error("internal: {0}")]
    Internal(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn in_frame(self, frame: usize) -> Self {
        Error::Frame {
            frame,
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}

//! One error type for the whole library.
//!
//! Everything that can go wrong falls into a few families: shape mismatches
//! caught when a tape primitive is applied, domain violations (log of a
//! non-positive value, a sample outside a distribution's support), numeric
//! failures during training or evidence computation, and malformed input
//! data. The CLI crate wraps these in `anyhow` for reporting; inside the
//! library they stay structured so tests can match on them.

use std::fmt;
use std::io;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// A tape primitive was applied to tensors whose shapes don't combine.
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
        detail: String,
    },
    /// An input value lies outside the mathematical domain of an operation
    /// or the support of a distribution.
    Domain { op: &'static str, detail: String },
    /// `backward` was called on a value that is not a scalar.
    NonScalarLoss { shape: Vec<usize> },
    /// `backward` was called on a value with no differentiable ancestors.
    DetachedGraph,
    /// The training loss became non-finite.
    NanLoss { step: u64 },
    /// A matrix expected to be positive definite failed its Cholesky
    /// factorization (reported with the pivot index that went non-positive).
    NotPositiveDefinite { pivot: usize },
    /// KL(q || p) is infinite because p assigns zero mass where q does not.
    InfiniteKl { index: usize },
    /// A dataset operation was given no rows to work with.
    EmptyData { what: &'static str },
    /// An IDX file had the wrong magic number.
    IdxBadMagic { expected: u32, found: u32 },
    /// An IDX file ended before its header said it would.
    IdxTruncated { expected_bytes: usize, found_bytes: usize },
    /// Image and label files disagree on the number of records.
    IdxCountMismatch { images: usize, labels: usize },
    /// A preprocessing step was applied to data in the wrong state.
    Preprocessing { detail: String },
    /// A checkpoint file is malformed or inconsistent with the model.
    Checkpoint { detail: String },
    /// A run configuration is invalid.
    Config { detail: String },
    Io(io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, shapes, detail } => {
                let rendered: Vec<String> =
                    shapes.iter().map(|s| format!("{s:?}")).collect();
                write!(f, "{op}: incompatible shapes {}: {detail}", rendered.join(" vs "))
            }
            Error::Domain { op, detail } => write!(f, "{op}: domain error: {detail}"),
            Error::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Error::DetachedGraph => {
                write!(f, "backward called on a value with no differentiable ancestors")
            }
            Error::NanLoss { step } => {
                write!(f, "loss became non-finite at step {step}")
            }
            Error::NotPositiveDefinite { pivot } => {
                write!(f, "matrix is not positive definite (pivot {pivot} <= 0)")
            }
            Error::InfiniteKl { index } => {
                write!(f, "KL divergence is infinite: p has zero mass at index {index} where q does not")
            }
            Error::EmptyData { what } => write!(f, "{what} contains no data"),
            Error::IdxBadMagic { expected, found } => {
                write!(f, "IDX magic mismatch: expected {expected}, found {found}")
            }
            Error::IdxTruncated { expected_bytes, found_bytes } => {
                write!(f, "IDX file truncated: header promises {expected_bytes} bytes, found {found_bytes}")
            }
            Error::IdxCountMismatch { images, labels } => {
                write!(f, "IDX image/label count mismatch: {images} images vs {labels} labels")
            }
            Error::Preprocessing { detail } => write!(f, "preprocessing: {detail}"),
            Error::Checkpoint { detail } => write!(f, "checkpoint: {detail}"),
            Error::Config { detail } => write!(f, "config: {detail}"),
            Error::Io(e) => write!(f, "io: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}

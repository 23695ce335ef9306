use std::fmt;

/// Error type shared across the crate.
///
/// Everything is stored as owned data (no source chaining) so errors stay
/// `Clone + PartialEq`, which the tests lean on heavily.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two tensors disagree on shape for a binary op.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A single tensor has a shape the op cannot accept.
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    /// `backward` was called on a tensor that is not a scalar.
    NotScalar { shape: Vec<usize> },
    /// A non-finite value showed up where the math requires finite input.
    NonFinite { context: String },
    /// A class label fell outside the valid range.
    LabelOutOfRange { label: usize, limit: usize },
    /// Configuration validation failed; every problem is listed.
    Config { problems: Vec<String> },
    /// A text file (manifest or config) failed to parse.
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
    /// Filesystem or image decode failure, with the offending path.
    Io { path: String, reason: String },
    /// A checkpoint file is malformed or has an unsupported version.
    Checkpoint { reason: String },
    /// Internal bookkeeping broke (e.g. missing probabilities for a sample).
    Bookkeeping { reason: String },
    /// Training produced a non-finite loss.
    Diverged { epoch: usize, detail: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            Error::InvalidShape { op, shape, reason } => {
                write!(f, "{op}: invalid shape {shape:?}: {reason}")
            }
            Error::NotScalar { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::LabelOutOfRange { label, limit } => {
                write!(f, "label {label} out of range (limit {limit})")
            }
            Error::Config { problems } => {
                write!(f, "invalid configuration: {}", problems.join("; "))
            }
            Error::Parse { path, line, reason } => {
                write!(f, "{path}:{line}: {reason}")
            }
            Error::Io { path, reason } => write!(f, "{path}: {reason}"),
            Error::Checkpoint { reason } => write!(f, "bad checkpoint: {reason}"),
            Error::Bookkeeping { reason } => write!(f, "bookkeeping error: {reason}"),
            Error::Diverged { epoch, detail } => {
                write!(f, "training diverged at epoch {epoch}: {detail}")
            }
        }
    }
}

impl std::error::Error for Error {}

impl Error {
    pub fn io(path: impl fmt::Display, err: impl fmt::Display) -> Self {
        Error::Io {
            path: path.to_string(),
            reason: err.to_string(),
        }
    }
}

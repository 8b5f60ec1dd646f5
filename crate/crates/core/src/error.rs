use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: domain error: {reason}")]
    Domain { op: &'static str, reason: String },
    #[error("{op}: degenerate input: {reason}")]
    Degenerate { op: &'static str, reason: String },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("backward: {0}")]
    Backward(String),
    #[error("gradient check: function is not deterministic (f = {first} then {second})")]
    NonDeterministic { first: f64, second: f64 },
    #[error("singular gradient: {0}")]
    SingularGradient(String),
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error("invalid config `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error("loss {loss} became non-finite at iteration {iteration}")]
    NonFiniteLoss { iteration: usize, loss: String },
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("spec hash mismatch: checkpoint {found}, expected {expected}")]
    SpecHash { found: String, expected: String },
    #[error("unsupported version {found} (expected {expected})")]
    Version { found: String, expected: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn invalid_shape(op: &'static str, shape: &[usize], reason: impl Into<String>) -> Self {
        Error::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: reason.into(),
        }
    }

    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }
}

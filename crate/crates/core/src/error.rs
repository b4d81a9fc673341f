//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, KvdError>;

#[derive(Debug, Error)]
pub enum KvdError {
    /// Tensor shapes incompatible for an operation; names the op node.
    #[error("shape mismatch in `{op}`: {detail}")]
    ShapeMismatch { op: String, detail: String },

    /// An op produced a non-finite value (NaN or infinity).
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: String },

    /// An argument violated an operation's precondition.
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// Sequence or cache would exceed the configured maximum position.
    #[error("sequence length {len} exceeds max_pos {max_pos}")]
    Overlength { len: usize, max_pos: usize },

    /// Training loss diverged.
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A serialized file failed structural validation.
    #[error("bad file format in {path}: {detail}")]
    BadFormat { path: String, detail: String },

    /// File was produced under a different model configuration.
    #[error("config hash mismatch in {path}: file {found:#018x}, model {expected:#018x}")]
    ConfigMismatch {
        path: String,
        found: u64,
        expected: u64,
    },
}

impl KvdError {
    pub fn shape(op: &str, detail: impl Into<String>) -> Self {
        KvdError::ShapeMismatch {
            op: op.to_string(),
            detail: detail.into(),
        }
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        KvdError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

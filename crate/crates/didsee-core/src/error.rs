//! Error type shared by every didsee module.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates an operation's precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The object is in a state that does not admit the requested operation.
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// A timestep or index lies outside the valid range.
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    /// Two tensors that must agree in shape do not.
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    /// On-disk data is malformed, truncated, or has the wrong version.
    #[error("format error: {0}")]
    Format(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid_argument(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn invalid_state(msg: impl Into<String>) -> Self {
        Error::InvalidState(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}

/// Checks that two (channels, height, width) shapes agree.
pub(crate) fn ensure_same_shape(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            expected: format!("{a:?}"),
            got: format!("{b:?}"),
        });
    }
    Ok(())
}

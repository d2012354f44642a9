//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// kl(p || q) has no finite value, e.g. q = 0 with p > 0.
    #[error("kl({p} || {q}) is infinite")]
    InfiniteDivergence { p: f64, q: f64 },

    /// An argument violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Empirical and candidate risk are too close for the implicit
    /// derivative of the kl constraint to be well conditioned.
    #[error("risk separation q - p = {sep:e} is below the threshold {eps:e}")]
    DegenerateSeparation { sep: f64, eps: f64 },

    /// A loss kind with no pathwise gradient was passed to backward.
    #[error("loss kind {0} has no pathwise gradient")]
    UnsupportedLoss(&'static str),

    /// A binary file did not start with the expected magic number.
    #[error("{file}: bad magic number: expected {expected}, found {found}")]
    BadMagic {
        file: String,
        expected: String,
        found: String,
    },

    /// A binary file ended before the declared payload.
    #[error("{file}: truncated at byte {offset}: expected {expected} more bytes for {what}")]
    Truncated {
        file: String,
        offset: usize,
        expected: usize,
        what: &'static str,
    },

    /// Image and label files declare different example counts.
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    /// A label byte outside the declared class range.
    #[error("label {value} at index {index} exceeds maximum class {max}")]
    BadLabel { index: usize, value: u8, max: u8 },

    /// A config file line that cannot be applied, keyed by field name.
    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: msg.into(),
        }
    }
}

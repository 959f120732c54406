use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at {location}: {message}")]
    Shape { location: String, message: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("oracle scale exceeded: {what} needs {entries} entries (limit {limit})")]
    OracleScale {
        what: &'static str,
        entries: usize,
        limit: usize,
    },

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown likelihood `{0}`")]
    UnknownLikelihood(String),

    #[error("scalar-output variance formula requires C = 1, got C = {0}")]
    ScalarOutputOnly(usize),

    #[error("idx: bad magic number {found:#010x} (expected {expected:#010x})")]
    BadMagic { expected: u32, found: u32 },

    #[error("idx: truncated file ({0})")]
    Truncated(String),

    #[error("idx: image/label count mismatch ({images} images, {labels} labels)")]
    CountMismatch { images: usize, labels: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(location: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Shape {
        location: location.into(),
        message: message.into(),
    }
}

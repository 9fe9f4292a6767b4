use thiserror::Error;

/// Crate-wide error type. Variants carry enough context to point at the
/// offending axis, file, or line without a debugger.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch on axis {axis}: expected {expected}, got {got} ({context})")]
    Shape {
        axis: usize,
        expected: usize,
        got: usize,
        context: String,
    },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {path} line {line}: {message}")]
    Format {
        path: String,
        line: usize,
        message: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}; last good checkpoint written to {checkpoint}")]
    Diverged { epoch: usize, checkpoint: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

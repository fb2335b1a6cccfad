use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {error}")]
    Io { path: PathBuf, error: std::io::Error },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{0}")]
    Tensor(String),

    #[error("config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("memory bank has no entries for object {0}")]
    EmptyBank(u8),

    #[error("out-of-order memory write for object {object}: frame {frame} after {last}")]
    OutOfOrder { object: u8, frame: usize, last: usize },

    #[error("frame {frame}: {error}")]
    AtFrame { frame: usize, error: Box<Error> },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            error: source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn at_frame(self, frame: usize) -> Self {
        match self {
            e @ Error::AtFrame { .. } => e,
            e => Error::AtFrame {
                frame,
                error: Box::new(e),
            },
        }
    }
}

use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cell index {index} out of range for a {ncols}x{ncols} grid")]
    IndexOutOfRange { index: usize, ncols: usize },

    #[error("invalid maze: {0}")]
    InvalidMaze(String),

    #[error("goal is unreachable from the start cell")]
    Unreachable,

    #[error("step called on a terminal state")]
    TerminalStep,

    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("every action of the root is pruned")]
    DeadRoot,

    #[error("root has no selectable children")]
    NoChildren,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("missing checkpoint for train seed {seed} at {}", path.display())]
    MissingCheckpoint { seed: u64, path: PathBuf },

    #[error("checkpoint {}: {message}", path.display())]
    Checkpoint { path: PathBuf, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }
}

//! File formats, checkpoints and command implementations for the glacnet
//! story generator. The numeric core lives in [`glacnet_core`].

use std::io;
use std::path::{Path, PathBuf};

pub mod checkpoint;
pub mod commands;
pub mod config_file;
pub mod corpus_io;
pub mod exempt;

pub use checkpoint::CheckpointFile;
pub use config_file::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {error}")]
    Open { path: PathBuf, error: io::Error },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("{0}")]
    Format(String),
    #[error("{path}: {message}")]
    InFile { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] glacnet_core::Error),
}

impl IoError {
    pub(crate) fn open(path: &Path, error: io::Error) -> Self {
        IoError::Open {
            path: path.to_path_buf(),
            error,
        }
    }

    pub(crate) fn in_file(self, path: &Path) -> Self {
        match self {
            e @ (IoError::Open { .. } | IoError::Parse { .. } | IoError::InFile { .. }) => e,
            other => IoError::InFile {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        }
    }
}

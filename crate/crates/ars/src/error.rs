use std::path::{Path, PathBuf};

use ars_core::protocol::ProtocolError;

use crate::formats::FormatError;
use crate::idx::IdxError;
use crate::tabular::TabularError;

/// Process exit status for each error class.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const RUNTIME: i32 = 3;
    pub const MISSING_FILE: i32 = 4;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("runtime failure: {0}")]
    Runtime(String),
    #[error("dataset error: {0}")]
    Idx(#[from] IdxError),
    #[error("dataset error: {0}")]
    Tabular(#[from] TabularError),
    #[error("file format error: {0}")]
    Format(#[from] FormatError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn missing(path: &Path, e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingFile(path.to_path_buf())
        } else {
            CliError::Io {
                path: path.to_path_buf(),
                source: e,
            }
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Tabular(TabularError::Schema(_)) => exit::CONFIG,
            CliError::MissingFile(_) => exit::MISSING_FILE,
            _ => exit::RUNTIME,
        }
    }
}

impl From<ProtocolError> for CliError {
    fn from(e: ProtocolError) -> Self {
        match e {
            ProtocolError::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

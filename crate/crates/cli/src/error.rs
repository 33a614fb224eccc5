use std::path::{Path, PathBuf};

use qfm_core::QfmError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 2 config, 3 data, 4 numerical, 5 IO.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Io { .. } => 5,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> CliError {
        CliError::Io { path: path.to_path_buf(), source }
    }
}

impl From<QfmError> for CliError {
    fn from(e: QfmError) -> Self {
        let msg = e.to_string();
        let root = match &e {
            QfmError::ChainFailed { source, .. } => source.as_ref(),
            other => other,
        };
        match root {
            QfmError::Numerical(_) => CliError::Numerical(msg),
            QfmError::Degenerate(_) | QfmError::Dimension(_) => CliError::Data(msg),
            _ => CliError::Config(msg),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

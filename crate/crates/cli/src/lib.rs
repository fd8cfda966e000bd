//! Orchestration for the `boxworld` command: configuration, record files,
//! batch runs and reports.

pub mod commands;
pub mod config;
pub mod records;
pub mod report;

use boxworld_core::genesis::GenError;
use boxworld_core::probe::ProbeError;
use std::path::{Path, PathBuf};
use thiserror::Error as ThisError;

#[derive(Debug, ThisError)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}:{line}: unsupported schema_version {found:?}")]
    Schema {
        path: PathBuf,
        line: usize,
        found: Option<u64>,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("{0}: no records")]
    EmptyInput(PathBuf),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error("report: {0}")]
    Report(String),
}

impl Error {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn parse(path: &Path, line: usize, source: serde_json::Error) -> Self {
        Error::Parse {
            path: path.to_path_buf(),
            line,
            source,
        }
    }
}

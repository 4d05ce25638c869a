use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error(transparent)]
    Core(#[from] pugd_core::Error),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact {path:?}: {what}")]
    MissingArtifact { path: PathBuf, what: String },

    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl LabError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        LabError::Config(msg.into())
    }

    pub(crate) fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |source| LabError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("generation normalized to an empty trace")]
    EmptyTrace,

    #[error("feedback has no step labels")]
    DegenerateTrace,

    #[error("all importance weights are zero")]
    DegeneratePopulation,

    #[error("correctness histories have unequal lengths ({0} vs {1})")]
    MalformedHistory(usize, usize),

    #[error("negative token count: {0}")]
    NegativeTokens(i64),

    #[error("template error: {0}")]
    Template(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset line {line}: {message}")]
    Dataset { line: usize, message: String },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error(transparent)]
    Backend(#[from] crate::backends::BackendError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

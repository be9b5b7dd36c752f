use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic header in {0}")]
    BadMagic(PathBuf),
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("dimension mismatch: {what} (expected {expected}, found {found})")]
    DimMismatch {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("training diverged in {stage}: {report}")]
    Divergence { stage: String, report: String },
    #[error("checkpoint hash mismatch for {what}: map expects {expected}, loaded {found}")]
    HashMismatch {
        what: String,
        expected: String,
        found: String,
    },
    #[error("unknown node id {0}")]
    UnknownNode(usize),
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(PathBuf),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty input: {0}")]
    Empty(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

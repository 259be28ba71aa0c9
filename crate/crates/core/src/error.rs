use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest {path}, row {row}: {msg}")]
    Manifest { path: PathBuf, row: usize, msg: String },

    #[error("clip {clip_id}: cannot read image {path}: {msg}")]
    Image {
        clip_id: String,
        path: PathBuf,
        msg: String,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("mode `{mode}` needs the {branch} branch, which this model was built without")]
    MissingBranch { mode: &'static str, branch: &'static str },

    #[error("unknown fusion mode `{0}` (valid: temporal, spatial, early, t2s, s2t, late)")]
    UnknownMode(String),

    #[error("unknown task `{0}` (valid: casme2-5, casme2-3, samm-5, samm-3, casme3-7, casme3-4, synthetic-K)")]
    UnknownTask(String),

    #[error("dataset: {0}")]
    Data(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

use crate::stamp::FairnessStamp;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// State recovered from an edit that produced a non-finite loss or gradient.
#[derive(Debug, Clone)]
pub struct DivergenceInfo {
    pub batch: usize,
    pub iteration: usize,
    pub detail: String,
    /// Stamps as they were after the last step with a finite objective.
    pub last_finite: Vec<FairnessStamp<f32>>,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("length error: sequence of {len} tokens exceeds max_seq_len {max}")]
    Length { len: usize, max: usize },
    #[error("patch error: {0}")]
    Patch(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("load error ({path}): {reason}")]
    Load { path: PathBuf, reason: String },
    #[error("dataset error at {path}:{line}: {reason}")]
    DataLine {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("generation error: {0}")]
    Generation(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("location error: {0}")]
    Location(String),
    #[error("attach error: {0}")]
    Attach(String),
    #[error("loss error: {0}")]
    Loss(String),
    #[error("metric error on {set}: {reason}")]
    Metric { set: String, reason: String },
    #[error("check error: {0}")]
    Check(String),
    #[error("edit diverged at batch {} iteration {}: {}", .0.batch, .0.iteration, .0.detail)]
    Divergence(Box<DivergenceInfo>),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn load(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Load {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn metric(set: &str, reason: impl Into<String>) -> Self {
        Error::Metric {
            set: set.to_string(),
            reason: reason.into(),
        }
    }
}

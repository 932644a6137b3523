use std::path::PathBuf;

use thiserror::Error;

use crate::semantics::LabelError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("format error in {source_name} (row {row}): {reason}")]
    Format {
        source_name: String,
        row: usize,
        reason: String,
    },
    #[error("value out of range: {0}")]
    Range(String),
    #[error("invalid label: {0}")]
    Label(#[from] LabelError),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("synthesis failed for voice {voice_id:?} on text {text:?}: {reason}")]
    Synthesis {
        text: String,
        voice_id: String,
        reason: String,
    },
    #[error("corpus synthesis aborted: {completed} items completed, {} failed; first failure: {first}", failed.len())]
    CorpusSynthesis {
        completed: usize,
        failed: Vec<(String, String)>,
        first: String,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training diverged at epoch {epoch} (non-finite loss); model restored to last good weights{}", last_good.as_ref().map(|p| format!(", saved at {}", p.display())).unwrap_or_default())]
    Divergence {
        epoch: usize,
        last_good: Option<PathBuf>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("audio error in {path}: {reason}")]
    Audio { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(source_name: impl Into<String>, row: usize, reason: impl Into<String>) -> Self {
        Error::Format {
            source_name: source_name.into(),
            row,
            reason: reason.into(),
        }
    }
}

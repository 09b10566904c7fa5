use std::path::PathBuf;

use thiserror::Error;

/// Pipeline stage, used to attribute failures that surface deep inside a call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Partition,
    Selection,
    Merging,
    Budget,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Stage::Partition => "partition",
            Stage::Selection => "selection",
            Stage::Merging => "merging",
            Stage::Budget => "budget",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed npy header at byte {offset}: {reason}")]
    MalformedHeader { offset: usize, reason: String },

    #[error("unsupported npy dtype {descr:?}: only little-endian float32 ('<f4') is accepted")]
    UnsupportedDtype { descr: String },

    #[error("expected a rank-{expected} tensor, found shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },

    #[error("npy payload at byte {offset} holds {actual} bytes, shape requires {expected}")]
    Truncated {
        offset: usize,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f32 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("attention row {row} of frame {frame} is invalid: {reason}")]
    Attention {
        frame: usize,
        row: usize,
        reason: String,
    },

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },

    #[error("infeasible budget: {0}")]
    Infeasible(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },

    #[error("report: {0}")]
    Report(String),

    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Config {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn in_stage(self, stage: Stage) -> Self {
        match self {
            already @ Error::Stage { .. } => already,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

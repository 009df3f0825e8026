use thiserror::Error;

use crate::hooks::shape::ShapeInferenceError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("index error in {op}: {detail}")]
    Index { op: &'static str, detail: String },

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("row {row} of `{which}` is not a probability distribution")]
    InvalidDistribution { which: &'static str, row: usize },

    #[error("softmax row {row} is fully masked")]
    FullyMaskedRow { row: usize },

    #[error("collective {op} failed on rank {rank}: {detail}")]
    Collective {
        op: &'static str,
        rank: usize,
        detail: String,
    },

    #[error("rank {rank} aborted: another worker failed")]
    Aborted { rank: usize },

    #[error("worker rank {rank} failed: {message}")]
    WorkerFailed { rank: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown module `{name}`; did you mean one of: {}", candidates.join(", "))]
    UnknownModule {
        name: String,
        candidates: Vec<String>,
    },

    #[error("unknown parameter `{name}`; did you mean one of: {}", candidates.join(", "))]
    UnknownParameter {
        name: String,
        candidates: Vec<String>,
    },

    #[error(transparent)]
    ShapeInference(#[from] ShapeInferenceError),

    #[error("hook pipeline error at site `{site}`: {detail}")]
    Pipeline { site: String, detail: String },

    #[error("edit function failed: {0}")]
    Edit(String),

    #[error("tree error: {0}")]
    Tree(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("probe training diverged at step {step} (layer {layer})")]
    Divergence { step: usize, layer: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn index(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Index {
            op,
            detail: detail.into(),
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch, {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("batch_norm needs at least 2 samples in training mode, got {0}")]
    BatchSize(usize),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("training diverged: non-finite value in `{name}`")]
    Divergence { name: String },

    #[error("unknown identity label {label} (num_classes = {num_classes})")]
    Label { label: usize, num_classes: usize },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("degenerate interpolation: endpoints are antipodal (angle {angle:.6} rad)")]
    DegenerateInterpolation { angle: f64 },

    #[error("relative distance undefined: both distances are zero")]
    UndefinedRatio,

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: u64, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    #[error("invalid node id {node} (graph has {num_nodes} nodes)")]
    InvalidNode { node: usize, num_nodes: usize },

    #[error("numeric error at step {step}: {msg}")]
    Numeric { step: usize, msg: String },

    #[error("stability error: state entry must be negative, got {0}")]
    Stability(f64),

    #[error("state error: {0}")]
    State(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("order error: interaction at ts {got} follows ts {last}")]
    Order { last: f64, got: f64 },

    #[error("batch error: {0}")]
    Batch(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {msg}")]
    Diverged { epoch: usize, batch: usize, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-readable tag, used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::Validation(_) => "validation",
            Error::Dimension(_) => "dimension",
            Error::Config(_) => "config",
            Error::DegenerateSplit(_) => "degenerate_split",
            Error::InvalidNode { .. } => "invalid_node",
            Error::Numeric { .. } => "numeric",
            Error::Stability(_) => "stability",
            Error::State(_) => "state",
            Error::Metric(_) => "metric",
            Error::Sampling(_) => "sampling",
            Error::Order { .. } => "order",
            Error::Batch(_) => "batch",
            Error::Checkpoint(_) => "checkpoint",
            Error::Diverged { .. } => "diverged",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

use thiserror::Error;

/// Errors produced anywhere in the attack pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("node index {index} out of range for a graph with {count} nodes")]
    NodeOutOfRange { index: usize, count: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("degenerate vector: {0}")]
    Degenerate(String),

    #[error("training diverged at epoch {epoch}: {what}")]
    Diverged { epoch: usize, what: String },

    #[error("graph has no sensitive attribute")]
    MissingSensitive,

    #[error("overlapping node pools: {0}")]
    OverlappingPools(String),

    #[error("both classes must be present, found only class {0}")]
    SingleClass(usize),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

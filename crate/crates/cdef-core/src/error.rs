//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("dim mismatch at layer {layer}: expected in_dim {expected}, got {got}")]
    LayerDimMismatch {
        layer: usize,
        expected: usize,
        got: usize,
    },

    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("non-finite value produced in {context}")]
    NonFinite { context: String },

    #[error("loss spec requires an attack sensitive matrix for variant {variant}")]
    MissingMatrix { variant: String },

    #[error("matrix dimension {got} does not match class count {expected}")]
    MatrixDimMismatch { expected: usize, got: usize },

    #[error("invalid matrix: {reason}")]
    InvalidMatrix { reason: String },

    #[error("invalid weight matrix: {reason}")]
    InvalidWeights { reason: String },

    #[error("input coordinate {index} = {value} outside [0,1]")]
    InputOutOfRange { index: usize, value: f64 },

    #[error("sample {index} labeled {got}, expected source class {expected}")]
    MislabeledSample {
        index: usize,
        expected: usize,
        got: usize,
    },

    #[error("weighted cell ({i},{j}) has no robustness estimate")]
    WeightedEmptyCell { i: usize, j: usize },

    #[error("robustness matrix has no populated cells")]
    AllCellsEmpty,

    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("invalid config: {reason}")]
    InvalidConfig { reason: String },

    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("class {class} has {count} samples; at least 3 required to stratify")]
    ClassTooSmall { class: usize, count: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

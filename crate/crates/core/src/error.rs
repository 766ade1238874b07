use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("expected a single-element tensor, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("conv2d: {0}")]
    Geometry(String),
    #[error("backward already ran on this graph; call reset_grads first")]
    AlreadyBackpropagated,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("layer {layer} ({kind}): {message}")]
    Geometry {
        layer: usize,
        kind: &'static str,
        message: String,
    },
    #[error("model must end with a softmax layer")]
    MissingSoftmax,
    #[error("unknown model {0:?}")]
    UnknownModel(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { expected: u32, found: u32 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: bad magic number {found:#010x} (expected {expected:#010x})")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("{path}: truncated file (expected {expected} bytes of payload, found {found})")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at index {index} is out of range for {classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("subsample ratio {0} is outside (0, 1]")]
    InvalidRatio(f64),
    #[error("subsample ratio {ratio} of {len} samples selects nothing")]
    EmptySubset { ratio: f64, len: usize },
    #[error("noise standard deviation must be non-negative, got {0}")]
    NegativeSigma(f64),
    #[error("dataset is empty")]
    Empty,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Top-level error for training, evaluation and reporting.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("non-finite loss at step {step}: usual={usual}, lipschitz={lipschitz}")]
    NonFiniteLoss {
        step: usize,
        usual: f64,
        lipschitz: f64,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use thiserror::Error;

use crate::tensor::TensorError;

/// Failures while decoding one of the binary containers.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },
    #[error("file truncated while reading {what}")]
    Truncated { what: &'static str },
    #[error("malformed contents: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("architecture mismatch: expected {expected}, found {found}")]
    ArchMismatch { expected: String, found: String },
    #[error("label row {row} sums to {sum}, expected 1")]
    LabelRow { row: usize, sum: f64 },
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("training diverged at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("trajectory snapshots {index} and {} are identical", index + 1)]
    DegenerateTrajectory { index: usize },
    #[error("class {class} has {have} images, {need} required")]
    ClassTooSmall { class: usize, have: usize, need: usize },
    #[error("match-loss normalizer vanished ({0:e}); teacher epochs are identical")]
    VanishingDenominator(f64),
    #[error("non-finite loss at unroll step {step}")]
    UnrollDiverged { step: usize },
    #[error("trajectory exhausted: need snapshot {needed}, buffers hold {available}")]
    TrajectoryExhausted { needed: usize, available: usize },
    #[error("insufficient data: need at least {need} points, got {got}")]
    InsufficientData { need: usize, got: usize },
    #[error("covariance is rank deficient: eigenvalue {index} is {value:e}")]
    RankDeficient { index: usize, value: f64 },
    #[error("rotational augmentation is only allowed on training images")]
    TestSplitAugment,
    #[error("fingerprint mismatch: {0}")]
    FingerprintMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("image import: {0}")]
    Import(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

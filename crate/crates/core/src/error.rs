use std::io;

use thiserror::Error;

/// Errors produced anywhere in the learning pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm below {threshold:e}", threshold = crate::numerics::ZERO_NORM_THRESHOLD)]
    ZeroNorm,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("backward called without a recorded forward pass")]
    NoForwardRecorded,

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("unsupported file format: {0}")]
    FormatVersionMismatch(String),

    #[error("corrupt header: {0}")]
    CorruptHeader(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("file size {0} is not a multiple of the CIFAR record size")]
    SizeNotMultipleOfRecord(u64),

    #[error("explicit memory is empty")]
    EmptyMemory,

    #[error("value {value} does not fit a signed {bits}-bit integer after a {shift}-bit right shift")]
    OverflowAfterShift { value: i64, bits: u32, shift: u32 },

    #[error("accumulator of class {class_id} overflows its {bits}-bit width")]
    AccumulatorOverflow { class_id: u32, bits: u32 },

    #[error("class {class_id} would absorb more than {max_shots} shots")]
    ShotLimitExceeded { class_id: u32, max_shots: u32 },

    #[error("class {0} is already stored in memory")]
    DuplicateClass(u32),

    #[error("no samples supplied for class {0}")]
    EmptySampleSet(u32),

    #[error("activation memory and explicit memory disagree: {0}")]
    MisalignedMemories(String),

    #[error("class {class_id} has {available} samples, {needed} required")]
    InsufficientSamples {
        class_id: u32,
        needed: usize,
        available: usize,
    },

    #[error("split needs {needed} classes, dataset has {available}")]
    InsufficientClasses { needed: usize, available: usize },

    #[error("conflicting flags: {0}")]
    ConflictingFlags(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("numeric failure: {0}")]
    NumericFailure(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
}

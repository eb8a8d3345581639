use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Error {
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("coordinate {coords:?} out of bounds for shape {shape:?}")]
    OutOfBounds { coords: Vec<usize>, shape: Vec<usize> },

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("scale overflow: required multiplier 2^{shift} does not fit in 16 bits")]
    ScaleOverflow { shift: i32 },

    #[error("shift overflow: right shift of {shift} exceeds 31")]
    ShiftOverflow { shift: i32 },

    #[error("empty tensor")]
    EmptyTensor,

    #[error("x = {x} outside 1..={s}")]
    TileOutOfRange { x: usize, s: usize },

    #[error("layer {layer} cannot be tiled: minimal tile needs {needed} B of L1, capacity {capacity} B")]
    Untileable {
        layer: String,
        needed: usize,
        capacity: usize,
    },

    #[error("depth-first tiling not applicable: single-row tile needs {needed} B of L1, capacity {capacity} B")]
    DftNotApplicable { needed: usize, capacity: usize },

    #[error("L2 capacity exceeded: {needed} B required, {capacity} B available")]
    CapacityExceeded { needed: usize, capacity: usize },

    #[error("step {step} ({kernel}): L1 working set {used} B exceeds capacity {capacity} B")]
    WorkingSetViolation {
        step: usize,
        kernel: String,
        used: usize,
        capacity: usize,
    },

    #[error("invalid memory configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("line {line}: field `{field}`: {reason}")]
    Parse {
        line: usize,
        field: String,
        reason: String,
    },

    #[error("model validation failed: {0}")]
    Validation(String),
}

pub type Result<T> = std::result::Result<T, Error>;

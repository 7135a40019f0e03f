use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid is not mirror-symmetric: cell ({row}, {col}) differs from its mirror")]
    SymmetryViolation { row: usize, col: usize },

    #[error("grid holds non-binary value {value} at ({row}, {col})")]
    NonBinaryInput { row: usize, col: usize, value: f64 },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("invalid timestep count {0}: a schedule needs at least 2 steps")]
    InvalidTimesteps(usize),

    #[error("timestep {t} outside [1, {max}]")]
    InvalidTimestep { t: usize, max: usize },

    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("`{field}` = {value} outside [{lo}, {hi}]")]
    OutOfRange {
        field: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("non-finite value in model input")]
    NonFiniteInput,

    #[error("training diverged: non-finite parameters after optimizer step {step}")]
    Diverged { step: u64 },

    #[error("model was trained with T = {model} but the schedule has T = {schedule}")]
    ScheduleMismatch { model: usize, schedule: usize },

    #[error("corrupt container: {0}")]
    CorruptContainer(String),

    #[error("unsupported format version {found} (this build reads {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("condition vector is all zeros, which is reserved for unconditional generation")]
    ReservedCondition,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

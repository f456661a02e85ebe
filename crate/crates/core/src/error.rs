use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left is {left:?}, right is {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid matrix data: {0}")]
    InvalidMatrix(String),

    #[error("svd did not converge after {sweeps} sweeps (off-diagonal mass {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },

    #[error("rank {rank} out of range (max {max}){}", .layer.as_ref().map(|l| format!(" for layer {l}")).unwrap_or_default())]
    RankOutOfRange {
        rank: usize,
        max: usize,
        layer: Option<String>,
    },

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),

    #[error("timestep {t} out of range [{lo}, {hi}]")]
    StepOutOfRange { t: usize, lo: usize, hi: usize },

    #[error("non-finite activation produced by layer {layer}")]
    NonFinite { layer: String },

    #[error("scatter from empty cache slot: layer {layer} at step {step}")]
    CacheMiss { layer: String, step: usize },

    #[error("calibration parameters missing for layer {layer}")]
    MissingCalibration { layer: String },

    #[error("calibration set is empty")]
    EmptyCalibrationSet,

    #[error("scale entry {value:e} below floor for layer {layer}")]
    ScaleBelowFloor { layer: String, value: f64 },

    #[error("invalid cache plan: {0}")]
    InvalidPlan(String),

    #[error("malformed container at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("mismatch: {0}")]
    Mismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InvalidMatrix(_) => "invalid_matrix",
            Error::NoConvergence { .. } => "no_convergence",
            Error::RankOutOfRange { .. } => "rank_out_of_range",
            Error::InvalidConfig(_) => "invalid_config",
            Error::InvalidSchedule(_) => "invalid_schedule",
            Error::StepOutOfRange { .. } => "step_out_of_range",
            Error::NonFinite { .. } => "non_finite",
            Error::CacheMiss { .. } => "cache_miss",
            Error::MissingCalibration { .. } => "missing_calibration",
            Error::EmptyCalibrationSet => "empty_calibration_set",
            Error::ScaleBelowFloor { .. } => "scale_below_floor",
            Error::InvalidPlan(_) => "invalid_plan",
            Error::Format { .. } => "format",
            Error::Mismatch(_) => "mismatch",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
        }
    }
}

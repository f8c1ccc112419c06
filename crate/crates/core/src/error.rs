use std::path::PathBuf;

/// Errors raised across the super-resolution pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("timestep {t} out of range for schedule of length {len}")]
    TimestepOutOfRange { t: usize, len: usize },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite values in {0}")]
    NonFinite(&'static str),

    #[error("parameter `{0}` is frozen; update rejected")]
    FrozenParameter(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("frozen parameters changed during training (group {group}: {before} -> {after})")]
    FrozenViolation {
        group: String,
        before: String,
        after: String,
    },

    #[error("missing condition: {0}")]
    MissingCondition(&'static str),

    #[error("empty or missing directory {0}")]
    EmptyDirectory(PathBuf),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::TimestepOutOfRange { .. } => "timestep_out_of_range",
            Error::InvalidSchedule(_) => "invalid_schedule",
            Error::InvalidConfig(_) => "invalid_config",
            Error::InvalidInput(_) => "invalid_input",
            Error::NonFinite(_) => "non_finite",
            Error::FrozenParameter(_) => "frozen_parameter",
            Error::UnknownParameter(_) => "unknown_parameter",
            Error::FrozenViolation { .. } => "frozen_violation",
            Error::MissingCondition(_) => "missing_condition",
            Error::EmptyDirectory(_) => "empty_directory",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
            Error::Image(_) => "image",
            Error::Candle(_) => "tensor",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
            Error::Toml(_) => "invalid_config",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

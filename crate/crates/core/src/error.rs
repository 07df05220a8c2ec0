use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("singular matrix: {0}")]
    Singular(&'static str),

    #[error("matrix is not positive semi-definite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("drift matrix undefined: |x3| = {x3:e} is below the singular guard")]
    SingularState { x3: f64 },

    #[error("trajectory diverged at step {step}")]
    Divergence { step: usize },

    #[error("trajectory {index} failed: {source}")]
    Trajectory {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch} (parameter norm {param_norm:e})")]
    NanLoss {
        epoch: usize,
        batch: usize,
        param_norm: f64,
    },

    #[error("unsupported container version {found} (this build reads up to {supported})")]
    Version { found: u32, supported: u32 },

    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing checkpoint: {}", .0.display())]
    MissingCheckpoint(PathBuf),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag, used for the CLI's JSON error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::NonFinite(_) => "non_finite",
            Error::Singular(_) => "singular",
            Error::NotPsd { .. } => "not_psd",
            Error::SingularState { .. } => "singular_state",
            Error::Divergence { .. } => "divergence",
            Error::Trajectory { .. } => "trajectory",
            Error::Calibration(_) => "calibration",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NanLoss { .. } => "nan_loss",
            Error::Version { .. } => "version",
            Error::Checksum { .. } => "checksum",
            Error::Format(_) => "format",
            Error::Config(_) => "config",
            Error::MissingCheckpoint(_) => "missing_checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

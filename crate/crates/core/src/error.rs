use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("step {t} out of range 1..={steps}")]
    InvalidStep { t: usize, steps: usize },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("uncalibrated: {0}")]
    Uncalibrated(String),

    #[error("degenerate statistics: {0}")]
    DegenerateStatistics(String),

    #[error("training diverged at epoch {epoch}, iteration {iteration}: loss = {loss}")]
    TrainingFailure {
        epoch: usize,
        iteration: usize,
        loss: f64,
    },

    #[error("unsupported {kind} version {found} (supported: {supported})")]
    UnsupportedVersion {
        kind: &'static str,
        found: u64,
        supported: u64,
    },

    #[error("parse error in {path} at byte {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: usize,
        message: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Machine-readable error code, stable across releases.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::InvalidConfig(_) => "invalid_config",
            Error::InvalidStep { .. } => "invalid_step",
            Error::InvalidSchedule(_) => "invalid_schedule",
            Error::Uncalibrated(_) => "uncalibrated",
            Error::DegenerateStatistics(_) => "degenerate_statistics",
            Error::TrainingFailure { .. } => "training_failure",
            Error::UnsupportedVersion { .. } => "unsupported_version",
            Error::Parse { .. } => "parse_error",
            Error::Validation(_) => "validation_error",
            Error::Io { .. } => "io_error",
            Error::Stage { source, .. } => source.code(),
        }
    }

    /// Process exit code for the CLI. Distinct per failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::InvalidInput(_) => 2,
            Error::UnsupportedVersion { .. } | Error::Parse { .. } | Error::Validation(_) => 3,
            Error::Io { .. } => 4,
            Error::TrainingFailure { .. } => 10,
            Error::Uncalibrated(_) => 11,
            Error::DegenerateStatistics(_) => 12,
            Error::InvalidStep { .. } | Error::InvalidSchedule(_) => 13,
            Error::Stage { source, .. } => source.exit_code(),
        }
    }
}

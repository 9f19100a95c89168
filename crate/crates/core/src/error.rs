use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type. Variants map onto the CLI exit codes: config and
/// validation problems exit 2, training divergence exits 3, missing
/// artifacts exit 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("simulation diverged: {0}")]
    SimulationDiverged(String),

    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error("bad container file {path}: {reason}")]
    BadContainer { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the CLI front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::SimulationDiverged(_) | Error::TrainingDiverged(_) => 3,
            Error::MissingArtifact(_) => 4,
            _ => 2,
        }
    }
}

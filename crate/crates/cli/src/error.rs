use std::path::PathBuf;

use oodsynth_core::Error as CoreError;

/// Failure of a pipeline stage, classified for the process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("missing artifact {}; run `{stage}` first", path.display())]
    MissingArtifact { path: PathBuf, stage: &'static str },

    #[error("refusing to overwrite {}; pass --force to replace it", .0.display())]
    WouldOverwrite(PathBuf),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Core(CoreError),

    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::NonFinite(msg) => CliError::Numerical(msg),
            CoreError::DegenerateEmbedding { .. } | CoreError::ZeroDistance { .. } => {
                CliError::Numerical(e.to_string())
            }
            other => CliError::Core(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(CoreError::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(CoreError::Json(e))
    }
}

impl CliError {
    /// 1 usage, 2 missing artifact, 3 numerical failure; other failures
    /// (I/O, malformed files) also report 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingArtifact { .. } => 2,
            CliError::Numerical(_) => 3,
            _ => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

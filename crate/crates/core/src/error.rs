use std::path::PathBuf;

/// Errors produced by the core library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid noise schedule: {0}")]
    Schedule(String),

    #[error("degenerate feature embedding for sample {index} (norm {norm:e})")]
    DegenerateEmbedding { index: usize, norm: f64 },

    #[error("k-NN gradient undefined at zero distance for sample {index}")]
    ZeroDistance { index: usize },

    #[error("feature guidance requires an embedding bank")]
    MissingBank,

    #[error("{path}: line {line}: {reason}")]
    MalformedRow {
        path: PathBuf,
        line: u64,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Batch row responsible for the error, when it concerns a single sample.
    pub fn sample_index(&self) -> Option<usize> {
        match self {
            Error::DegenerateEmbedding { index, .. } | Error::ZeroDistance { index } => {
                Some(*index)
            }
            _ => None,
        }
    }
}

use thiserror::Error;

/// Errors produced anywhere in the registration pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("normalization failed: row {row} has zero norm")]
    ZeroRow { row: usize },

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("degenerate correspondence geometry: {0}")]
    Degenerate(String),

    #[error("loss error: {0}")]
    Loss(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("stage `{stage}` failed on input {digest:016x}: {source}")]
    Stage {
        stage: &'static str,
        digest: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

/// Errors produced by dataset ingestion, training, hypergraph construction
/// and solving.
#[derive(Debug, Error)]
pub enum UvhlError {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column {col}: {msg}")]
    Parse { row: usize, col: String, msg: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged at epoch {epoch}: {msg}")]
    Training { epoch: usize, msg: String },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("iteration limit reached: {0}")]
    Convergence(String),

    #[error("hypergraph construction failed: {0}")]
    Construction(String),

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<UvhlError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, UvhlError>;

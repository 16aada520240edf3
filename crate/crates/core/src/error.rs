use crate::trainer::TrainHistory;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty retrieval pool after exclusion")]
    EmptyPool,

    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),

    #[error("token id {id} out of range for vocabulary size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged {
        epoch: usize,
        history: Box<TrainHistory>,
    },

    #[error("pretraining diverged (non-finite loss) in {stage} at step {step}")]
    PretrainDiverged { stage: String, step: usize },

    #[error("missing record for query {0}")]
    MissingRecord(u32),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("png error at {path}: {message}")]
    Png { path: String, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("degenerate prompt shift for target prompt {prompt_id}: source and target embeddings coincide")]
    DegenerateShift { prompt_id: usize },

    #[error("training diverged: loss non-finite for {streak} consecutive iterations ending at iteration {iteration}")]
    Divergence { iteration: usize, streak: usize },

    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("tensor archive: {0}")]
    Archive(String),

    #[error("dataset load ({record}): {reason}")]
    DatasetLoad { record: String, reason: String },

    #[error("image codec: {0}")]
    Image(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

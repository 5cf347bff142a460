use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("prompt has {words} words but at most {max} fit in a sequence of length {seq_len}")]
    PromptTooLong {
        words: usize,
        max: usize,
        seq_len: usize,
    },

    #[error("attention graph is degenerate: row {row} has no outgoing weight")]
    DegenerateGraph { row: usize },

    #[error("every attention head was rejected by the variance filter")]
    AllHeadsFiltered,

    #[error("degradation ratio {0} is outside [0, 2]")]
    InvalidRatio(f64),

    #[error("requested subspace dimension {requested} exceeds numerical rank {rank}")]
    RankDeficient { requested: usize, rank: usize },

    #[error("metric is undefined: {0}")]
    UndefinedMetric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

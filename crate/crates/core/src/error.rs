use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box {0}")]
    InvalidBox(String),

    #[error("box mode `{mode}` requires `{field}`")]
    MissingField { mode: String, field: &'static str },

    #[error("invalid embedding: {0}")]
    InvalidEmbedding(String),

    #[error("contrastive batch: {0}")]
    InvalidBatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{queries} queries cannot cover {gts} ground-truth objects")]
    TooFewQueries { queries: usize, gts: usize },

    #[error("decoder query counts differ: center {center}, top-left {top_left}")]
    QueryMismatch { center: usize, top_left: usize },

    #[error("unknown {kind} `{name}` (known: {known})")]
    Unknown { kind: &'static str, name: String, known: String },

    #[error("invalid model config: {0}")]
    ModelConfig(String),

    #[error("config field `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("schema violation at {record}: {message}")]
    Schema { record: String, message: String },

    #[error("missing image file {0}")]
    MissingImage(PathBuf),

    #[error("infeasible synthetic spec: {0}")]
    Infeasible(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("image {height}x{width} is smaller than the backbone stride {stride}")]
    ImageTooSmall { height: usize, width: usize, stride: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step}; batch dump written to {}", dump.display())]
    NonFiniteLoss { step: usize, dump: PathBuf },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn unknown<'a>(kind: &'static str, name: &str, known: impl IntoIterator<Item = &'a str>) -> Self {
        Error::Unknown {
            kind,
            name: name.to_string(),
            known: known.into_iter().collect::<Vec<_>>().join(", "),
        }
    }
}

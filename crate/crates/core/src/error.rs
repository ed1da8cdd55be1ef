use thiserror::Error;

use crate::grid::GridIndex;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point outside grid")]
    OutsideGrid,
    #[error("invalid grid index {0:?}")]
    InvalidIndex(GridIndex),
    #[error("invalid mode {0}")]
    InvalidMode(usize),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid track: {0}")]
    InvalidTrack(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("artifact mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

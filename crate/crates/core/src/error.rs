use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A token does not belong to the sub-vocabulary its slot or tag demands.
    #[error("layout error at position {position}: {reason}")]
    Layout { position: usize, reason: String },

    #[error("framing error: {len} tokens is not a multiple of {unit}")]
    Framing { len: usize, unit: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("encoding error: character {0:?} is outside the charset")]
    Encoding(char),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("input of {len} positions exceeds max_positions {max}")]
    Length { len: usize, max: usize },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

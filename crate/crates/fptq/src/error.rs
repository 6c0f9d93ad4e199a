//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),

    #[error("degenerate stats: tensor absmax is zero")]
    DegenerateStats,

    #[error("stats mismatch: {0}")]
    StatsMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("recipe schema: {0}")]
    RecipeSchema(String),

    #[error("model/recipe mismatch: {0}")]
    RecipeMismatch(String),

    #[error("calibration source: {0}")]
    CalibSource(String),

    #[error("token id {id} out of vocabulary range {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("sequence length {len} exceeds max_seq {max}")]
    SeqTooLong { len: usize, max: usize },

    #[error("kv cache overflow at {len} rows (max_seq {max})")]
    CacheOverflow { len: usize, max: usize },

    #[error("outlier profile unreachable after {iterations} rounds; achieved ranges: {achieved}")]
    ProfileUnreachable { iterations: usize, achieved: String },

    #[error("no raw capture: calibration ran without activation sampling")]
    NoRawCapture,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

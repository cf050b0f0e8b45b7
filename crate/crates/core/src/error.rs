use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("syntax error at byte offset {offset}")]
    Parse { offset: usize },

    #[error("syntax node kinds without a taxonomy mapping: {}", kinds.join(", "))]
    Taxonomy { kinds: Vec<String> },

    #[error("unsupported language `{0}`")]
    UnsupportedLanguage(String),

    #[error("invalid source unit: {0}")]
    InvalidUnit(String),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: String, found: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("non-finite loss in {stage} at batch {batch}")]
    NonFiniteLoss { stage: &'static str, batch: usize },

    #[error("frozen decoder parameters changed: {before} -> {after}")]
    FrozenViolation { before: String, after: String },

    #[error("sequence length {len} exceeds context window {max}")]
    Length { len: usize, max: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

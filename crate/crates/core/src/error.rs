use std::io;

use thiserror::Error;

pub type Result<T, E = GiftError> = std::result::Result<T, E>;

/// Errors surfaced by every layer of the crate.
#[derive(Debug, Error)]
pub enum GiftError {
    #[error("empty attention row")]
    EmptyAttentionRow,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("degenerate saliency: {0}")]
    DegenerateSaliency(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("no info-rich tokens")]
    NoInfoRichTokens,
    #[error("no fusion band: no layer reaches visual proportion {threshold}")]
    NoFusionBand { threshold: f64 },
    #[error("layer {layer} out of range ({available} layers available)")]
    LayerOutOfRange { layer: usize, available: usize },
    #[error("context overflow: {needed} positions needed, model holds {max}")]
    ContextOverflow { needed: usize, max: usize },
    #[error("steering hook returned invalid attention: {0}")]
    InvalidHookOutput(String),
    #[error("malformed ATN1 data at byte offset {offset}: {reason}")]
    Atn1 { offset: usize, reason: String },
    #[error("invalid fixture: {0}")]
    Fixture(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

impl GiftError {
    /// True when the error stems from bad input data rather than a broken
    /// invariant inside the library.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, GiftError::InvalidHookOutput(_))
    }
}

use thiserror::Error;

/// Failure modes shared by every stage of the pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numerical degeneracy: {0}")]
    Degenerate(String),

    #[error(
        "tempering too large: data term spans {range:.1} nats at alpha = {alpha}; retry with a smaller alpha"
    )]
    TemperingTooLarge { range: f64, alpha: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("tree sampler failure: {0}")]
    Sampler(String),

    #[error("model selection failure: {0}")]
    Selection(String),

    #[error("AUC undefined: ground truth contains a single class")]
    UndefinedAuc,
}

impl Error {
    /// True for errors caused by numerics rather than by the caller's input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Degenerate(_) | Error::TemperingTooLarge { .. } | Error::Sampler(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

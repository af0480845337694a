use thiserror::Error;

/// Errors raised anywhere in the market pipeline.
#[derive(Debug, Error)]
pub enum MarketError {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("line {line}: {msg}")]
    Row { line: usize, msg: String },

    #[error("timestamps are not strictly increasing at data row {row}")]
    Ordering { row: usize },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("unknown feature `{0}`")]
    Lookup(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("singular system{}: {msg}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    Singular { step: Option<usize>, msg: String },

    #[error("Newton iterations did not converge after {iterations} iterations (gradient max-norm {gradient_norm:e})")]
    Convergence { iterations: usize, gradient_norm: f64 },

    #[error(
        "{features} support features exceed the exact-enumeration cap of {cap}; use the Monte-Carlo Shapley allocation"
    )]
    CapExceeded { features: usize, cap: usize },

    #[error("no surplus: loss improvement {0} is not positive")]
    NoSurplus(f64),

    #[error("incomplete coalition coverage, missing: {0:?}")]
    Coverage(Vec<String>),

    #[error("coalition {coalition}: {source}")]
    InCoalition {
        coalition: String,
        #[source]
        source: Box<MarketError>,
    },

    #[error("online run aborted in the chunk starting at row {step}: {source}")]
    StepFailed {
        step: usize,
        /// JSON session snapshot taken at the start of the failing chunk.
        checkpoint: Box<String>,
        #[source]
        source: Box<MarketError>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl MarketError {
    pub(crate) fn in_coalition(self, coalition: impl std::fmt::Display) -> Self {
        MarketError::InCoalition {
            coalition: coalition.to_string(),
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping coalition context wrappers.
    pub fn root(&self) -> &MarketError {
        match self {
            MarketError::InCoalition { source, .. } | MarketError::StepFailed { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, MarketError>;

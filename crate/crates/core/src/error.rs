use thiserror::Error;

pub type Result<T, E = FlowError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("singular configuration: particles {i} and {j} coincide")]
    SingularConfiguration { i: usize, j: usize },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("integration diverged at step {step} (t = {t:.4}): {detail}")]
    IntegrationDiverged { step: usize, t: f64, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate importance weights: {0}")]
    DegenerateWeights(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl FlowError {
    /// Stable machine-readable identifier, used by the command line front end.
    pub fn code(&self) -> &'static str {
        match self {
            FlowError::Domain(_) => "E_DOMAIN",
            FlowError::Shape(_) => "E_SHAPE",
            FlowError::SingularConfiguration { .. } => "E_SINGULAR",
            FlowError::Unsupported(_) => "E_UNSUPPORTED",
            FlowError::IntegrationDiverged { .. } => "E_DIVERGED",
            FlowError::Config(_) => "E_CONFIG",
            FlowError::DegenerateWeights(_) => "E_WEIGHTS",
            FlowError::Format(_) => "E_FORMAT",
            FlowError::Io(_) => "E_IO",
            FlowError::Json(_) => "E_JSON",
        }
    }
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(FlowError::Shape(msg.into()))
}

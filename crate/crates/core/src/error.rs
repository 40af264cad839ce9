use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown environment id `{0}`")]
    UnknownEnv(String),

    #[error("non-finite value produced by {context}")]
    NonFinite { context: String },

    #[error("reward {raw} outside declared bounds [{min}, {max}]")]
    RewardOutOfBounds { raw: f64, min: f64, max: f64 },

    #[error("unsupported latent pair (state {state:#x}, action {action}): no observed transitions")]
    UnsupportedPair { state: u64, action: usize },

    #[error("label preservation violated at step {step}: embedding prefix {latent:#b} differs from label {label:#b}")]
    LabelMismatch { step: usize, latent: u64, label: u64 },

    #[error("ergodicity assumption violated: chain has {count} bottom strongly connected components")]
    Reducible { count: usize },

    #[error("infeasible transport marginals: masses {lhs} and {rhs} differ")]
    InfeasibleMarginals { lhs: f64, rhs: f64 },

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("insufficient samples: {got} transitions used, {required} required")]
    InsufficientSamples { required: u64, got: u64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("backward pass already consumed this graph; run a new forward pass")]
    GraphConsumed,

    #[error("training diverged at step {step}: non-finite loss")]
    Diverged { step: u64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

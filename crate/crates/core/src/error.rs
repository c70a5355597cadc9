use thiserror::Error;

/// Errors raised by the optimization core.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("empty batch")]
    EmptyBatch,
    #[error("numerical overflow")]
    NumericalOverflow,
    #[error("hessian unsupported")]
    HessianUnsupported,
    #[error("singular normal equations")]
    SingularNormalEquations,
    #[error("more clients than samples")]
    MoreClientsThanSamples,
    #[error("labels required")]
    LabelsRequired,
    #[error("ratio too extreme")]
    RatioTooExtreme,
    #[error("gamma out of range: {0}")]
    GammaOutOfRange(f64),
    #[error("local solve failed")]
    LocalSolveFailed,
    #[error("divergence at iteration {0}")]
    Divergence(usize),
    #[error("zero momentum")]
    ZeroMomentum,
    #[error("merit undefined at gamma=1")]
    MeritUndefined,
    #[error("rate undefined")]
    RateUndefined,
    #[error("eigendecomposition failed")]
    Eigendecomposition,
    #[error("shape mismatch: expected {expected} parameters, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },
    #[error("malformed idx data: {0}")]
    Idx(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("{0} did not converge within the sweep cap")]
    NoConvergence(&'static str),
    #[error("rank {rank} out of range (max {max})")]
    RankOutOfRange { rank: usize, max: usize },
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid quantization spec: {0}")]
    InvalidSpec(String),
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("layer `{0}` missing from bit-width map")]
    MissingLayer(String),
    #[error("unsupported layer `{layer}` for gradient computation: {reason}")]
    UnsupportedLayer { layer: String, reason: String },
    #[error("layer `{0}` already carries a compensation")]
    AlreadyCompensated(String),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("insufficient samples: need at least {needed}, have {have}")]
    InsufficientSamples { needed: usize, have: usize },
    #[error("stage ordering violated: {0}")]
    StageOrder(&'static str),
    #[error("rollout aborted at step {step}: {reason}")]
    RolloutAborted { step: usize, reason: String },
    #[error("denoising aborted at step {step}: non-finite intermediate")]
    DenoiseAborted { step: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dims(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            actual,
        }
    }
}

pub(crate) fn ensure_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::dims(context, expected, actual))
    }
}

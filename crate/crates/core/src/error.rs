use thiserror::Error;

pub type Result<T> = std::result::Result<T, KurtailError>;

#[derive(Debug, Error)]
pub enum KurtailError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("size {0} is not a power of two")]
    NotPowerOfTwo(usize),

    #[error("matrix is numerically rank deficient")]
    RankDeficient,

    #[error("matrix is singular: {0}")]
    Singular(String),

    #[error("cholesky factorization failed at pivot {0}; increase damping")]
    CholeskyFailed(usize),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid bit width {0}; need at least 2")]
    InvalidBits(u32),

    #[error("input is constant")]
    ConstantInput,

    #[error("input too short: need at least {needed}, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<KurtailError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl KurtailError {
    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        KurtailError::DimensionMismatch(msg.into())
    }
}

/// Tags an error with the pipeline stage it came from.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| KurtailError::Stage {
            stage,
            source: Box::new(e),
        })
    }
}

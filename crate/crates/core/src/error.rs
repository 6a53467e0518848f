use thiserror::Error;

pub type Result<T, E = MixError> = std::result::Result<T, E>;

/// Everything that can go wrong between reading a domain set and emitting a mixture.
#[derive(Debug, Error)]
pub enum MixError {
    #[error("unknown domain `{0}`")]
    UnknownDomain(String),
    #[error("domain id `{0}` collides with an existing domain")]
    IdCollision(String),
    #[error("partition of `{parent}` changes token count by {slack:.4} (limit 0.005)")]
    PartitionTokenMismatch { parent: String, slack: f64 },
    #[error("domain set has no tokens")]
    EmptyDomainSet,
    #[error("invalid domain set: {0}")]
    InvalidDomainSet(String),
    #[error("invalid mixture: {0}")]
    InvalidMixture(String),
    #[error("invalid update: {0}")]
    InvalidUpdate(String),
    #[error("invalid reuse plan: {0}")]
    InvalidPlan(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("rejection sampling exhausted after {attempts} consecutive rejections")]
    RejectionExhausted { attempts: usize },
    #[error("repetition caps are infeasible: caps sum to {sum:.6} < 1")]
    InfeasibleCaps { sum: f64 },
    #[error("underdetermined fit: {records} records, at least {required} required")]
    Underdetermined { records: usize, required: usize },
    #[error("kernel matrix is singular after jitter")]
    SingularKernel,
    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),
    #[error("no fitted model for `{0}`")]
    MissingModel(String),
    #[error("search produced no candidate satisfying the caps")]
    NoFeasibleCandidate,
    #[error("schema error: {0}")]
    Schema(String),
    #[error("row {row}: mixture weights sum to {sum:.9}")]
    SimplexViolation { row: usize, sum: f64 },
    #[error("unknown domain column `{0}`")]
    UnknownDomainColumn(String),
    #[error("removal leaves no mass on the surviving domains")]
    AllMassRemoved,
    #[error("update kind {0} is not supported here")]
    UnsupportedUpdateKind(String),
    #[error("operation requires log-linear models, found {0}")]
    WrongFamily(String),
    #[error("operation requires an Add update, found {0}")]
    WrongUpdateKind(String),
    #[error("strong-convexity estimate must be positive, got {0}")]
    NonPositiveMu(f64),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl MixError {
    /// Infeasibility errors get their own process exit code in the CLI.
    pub fn is_infeasibility(&self) -> bool {
        matches!(
            self,
            MixError::InfeasibleCaps { .. }
                | MixError::RejectionExhausted { .. }
                | MixError::NoFeasibleCandidate
        )
    }
}

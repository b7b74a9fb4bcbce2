use thiserror::Error;

pub type Result<T> = std::result::Result<T, HarmonizeError>;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum HarmonizeError {
    #[error("malformed row {row} in {file}: {reason}")]
    MalformedRow {
        file: String,
        row: usize,
        reason: String,
    },
    #[error("external-control row {row} in {file} has treatment = 1")]
    EcTreatedPatient { file: String, row: usize },
    #[error("unknown subgroup label {label:?} (row {row} in {file})")]
    UnknownSubgroup {
        file: String,
        row: usize,
        label: String,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("subgroup {subgroup} has no control patients in the combined data")]
    EmptySubgroup { subgroup: usize },
    #[error("empty {arm} arm")]
    EmptyArm { arm: &'static str },
    #[error("subgroup {subgroup} has an empty {arm} arm")]
    EmptySubgroupArm { subgroup: usize, arm: &'static str },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("design matrix is rank deficient (condition ratio {ratio:.3e})")]
    RankDeficient { ratio: f64 },
    #[error("separation detected after {iterations} iterations (max |coef| = {max_coef:.2})")]
    SeparationDetected { iterations: usize, max_coef: f64 },
    #[error("fit did not converge in {iterations} iterations (max |score| = {score:.3e})")]
    NotConverged { iterations: usize, score: f64 },
    #[error("Σ is not positive definite: {0}")]
    SingularSigma(String),
    #[error("inconsistent dimensions: {0}")]
    InconsistentDimensions(String),
    #[error("degenerate bias direction: πᵀb = {pi_dot_b:.3e}")]
    DegenerateDirection { pi_dot_b: f64 },
    #[error("invalid design: {0}")]
    InvalidDesign(String),
    #[error("estimate carries no covariance matrix")]
    MissingCovariance,
    #[error("prior covariance is singular or not positive definite")]
    SingularPrior,
    #[error("posterior covariance is singular: {0}")]
    SingularPosterior(String),
    #[error("negative variance {value:.3e} for subgroup {subgroup}")]
    NegativeVariance { subgroup: usize, value: f64 },
    #[error("replicate {index} failed: {reason}")]
    ReplicateFailure { index: usize, reason: String },
    #[error("invalid scenario: {0}")]
    InvalidSpec(String),
    #[error("invalid spike effect: {0}")]
    InvalidEffect(String),
    #[error("resampling pool too small: {0}")]
    PoolTooSmall(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl HarmonizeError {
    pub fn class(&self) -> ErrorClass {
        use HarmonizeError::*;
        match self {
            MalformedRow { .. }
            | EcTreatedPatient { .. }
            | UnknownSubgroup { .. }
            | DimensionMismatch(_)
            | EmptySubgroup { .. }
            | EmptyArm { .. }
            | EmptySubgroupArm { .. }
            | InsufficientData(_)
            | PoolTooSmall(_)
            | Io { .. }
            | Csv(_) => ErrorClass::Data,
            InvalidSpec(_) | InvalidEffect(_) | InvalidArgument(_) | Json(_) => ErrorClass::Config,
            _ => ErrorClass::Numerical,
        }
    }

    /// Stable machine-readable identifier for error records.
    pub fn code(&self) -> &'static str {
        use HarmonizeError::*;
        match self {
            MalformedRow { .. } => "malformed_row",
            EcTreatedPatient { .. } => "ec_treated_patient",
            UnknownSubgroup { .. } => "unknown_subgroup",
            DimensionMismatch(_) => "dimension_mismatch",
            EmptySubgroup { .. } => "empty_subgroup",
            EmptyArm { .. } => "empty_arm",
            EmptySubgroupArm { .. } => "empty_subgroup_arm",
            InsufficientData(_) => "insufficient_data",
            RankDeficient { .. } => "rank_deficient",
            SeparationDetected { .. } => "separation_detected",
            NotConverged { .. } => "not_converged",
            SingularSigma(_) => "singular_sigma",
            InconsistentDimensions(_) => "inconsistent_dimensions",
            DegenerateDirection { .. } => "degenerate_direction",
            InvalidDesign(_) => "invalid_design",
            MissingCovariance => "missing_covariance",
            SingularPrior => "singular_prior",
            SingularPosterior(_) => "singular_posterior",
            NegativeVariance { .. } => "negative_variance",
            ReplicateFailure { .. } => "replicate_failure",
            InvalidSpec(_) => "invalid_spec",
            InvalidEffect(_) => "invalid_effect",
            PoolTooSmall(_) => "pool_too_small",
            InvalidArgument(_) => "invalid_argument",
            Io { .. } => "io",
            Csv(_) => "csv",
            Json(_) => "json",
        }
    }
}

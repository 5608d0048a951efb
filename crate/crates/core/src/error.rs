//! Error type shared across the crate.

use thiserror::Error;

/// Errors raised by data validation, estimation, and selection routines.
#[derive(Debug, Error)]
pub enum Error {
    // -- partition / data validation --
    #[error("variable role sets overlap: {0}")]
    Overlap(String),
    #[error("variable role sets do not cover all {expected} variables (got {got})")]
    Incomplete { expected: usize, got: usize },
    #[error("regressor set R is not contained in S")]
    RNotInS,
    #[error("relevant set S must be nonempty")]
    EmptyS,
    #[error("U is empty but R is not")]
    UEmptyRNonempty,
    #[error("index {0} out of range for dimension {1}")]
    IndexOutOfRange(usize, usize),

    // -- CSV ingestion --
    #[error("cannot parse cell '{cell}' at line {line}")]
    Parse { line: usize, cell: String },
    #[error("row {line} has {got} fields, expected {expected}")]
    Ragged {
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("row {0} has no observed entries")]
    AllMissingRow(usize),
    #[error("dataset must have at least one row and one column")]
    EmptyData,
    #[error(transparent)]
    Io(#[from] std::io::Error),

    // -- numerics --
    #[error("matrix is not symmetric positive definite")]
    NotSpd,
    #[error("input scatter matrix is not positive semidefinite")]
    NotPsdInput,
    #[error("empty input")]
    Empty,
    #[error("{0} did not converge within the sweep limit")]
    NoConvergence(&'static str),

    // -- EM / model fitting --
    #[error("component {0} received (near-)zero responsibility mass")]
    EmptyComponent(usize),
    #[error("all {0} EM starts ended degenerate")]
    AllStartsDegenerate(usize),
    #[error("design matrix is column-rank deficient")]
    RankDeficient,
    #[error("column {0} has fewer than two observed values or zero variance")]
    ZeroVarianceColumn(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("no candidate model could be fitted")]
    NoValidModel,

    // -- missingness mechanism --
    #[error("missingness probability {0} outside (0, 1)")]
    RhoOutOfRange(f64),
    #[error("scenario {0} not in 1..=8")]
    BadScenario(usize),
    #[error("dimension {0} unsupported by this design")]
    BadD(usize),
    #[error("row {0} still fully missing after {1} mask redraws")]
    MaskRetryExhausted(usize, usize),

    // -- metrics --
    #[error("label vectors have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("normalizer sigma is zero")]
    ZeroSigma,
    #[error("weights sum to zero")]
    ZeroWeightSum,
    #[error("weights must be nonnegative and sum to one")]
    BadWeights,

    // -- configuration --
    #[error("config parse error: {0}")]
    ConfigParse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

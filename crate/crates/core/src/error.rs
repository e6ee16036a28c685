//! Error type shared across the toolkit.
//!
//! Errors are grouped into three categories that map onto process exit
//! codes: I/O failures (1), violated preconditions on caller input (2),
//! and internal invariant failures (3).

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    // --- I/O and parsing ---
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    // --- dataset validation ---
    #[error("bounds violation at line {line}: {msg}")]
    Bounds { line: usize, msg: String },
    #[error("dataset contains no records")]
    EmptyDataset,

    // --- budgets ---
    #[error("budget must be split into at least one part (got {0})")]
    InvalidParts(usize),
    #[error("epsilon must be positive (got {0})")]
    NonPositiveEpsilon(f64),
    #[error("delta must lie in (0, 1) (got {0})")]
    InvalidDelta(f64),
    #[error("epsilon must lie in (0, 1) and delta in (0, 1) (got eps={eps}, delta={delta})")]
    InvalidEpsilonDelta { eps: f64, delta: f64 },

    // --- mechanisms ---
    #[error("noise scale must be positive (got {0})")]
    NonPositiveScale(f64),
    #[error("smoothing parameter beta={beta} exceeds the admissible eps/(2 ln(2/delta)) = {max_beta}")]
    BetaTooLarge { beta: f64, max_beta: f64 },

    // --- estimators ---
    #[error("difference-in-means needs at least one record in both arms")]
    OneArmEmpty,
    #[error("variance estimation needs at least two records per arm (treated={treated}, control={control})")]
    InsufficientForVariance { treated: usize, control: usize },
    #[error("this estimator requires delta > 0")]
    DeltaZero,

    // --- aggregation ---
    #[error("no site reports to aggregate")]
    NoReports,
    #[error("exhaustive subset search is capped at 20 sites (got {0})")]
    TooManySites(usize),

    // --- simulation harness ---
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("cannot split {records} records into {sites} non-empty sites")]
    TooFewRecords { records: usize, sites: usize },
    #[error("epsilon schedule needs at least two sites (got {0})")]
    InvalidJ(usize),
    #[error("brute-force enumeration too large: {0} candidates")]
    TooLarge(u64),
    #[error("config error: {0}")]
    Config(String),
    #[error("internal invariant failure: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code category: 1 I/O, 2 precondition, 3 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Json(_) | Error::Parse { .. } => 1,
            Error::TooLarge(_) | Error::Internal(_) => 3,
            _ => 2,
        }
    }
}

use thiserror::Error;

use crate::population::Variable;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate school_id `{0}`")]
    DuplicateId(String),

    #[error("parse error at row {row}: {message}")]
    ParseError { row: usize, message: String },

    #[error("population is empty")]
    EmptyPopulation,

    #[error("variable {0} has zero variance")]
    DegenerateVariable(Variable),

    #[error("population `{0}` is already standardized")]
    AlreadyStandardized(String),

    #[error("population `{0}` must be standardized first")]
    NotStandardized(String),

    #[error("invalid correlation matrix: {0}")]
    InvalidCorrelation(String),

    #[error("cannot form {k} bins from {n} values")]
    InvalidBinCount { k: usize, n: usize },

    #[error("invalid target: {0}")]
    InvalidTarget(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unknown school `{0}`")]
    UnknownSchool(String),

    #[error("no replications to summarize")]
    NoReplications,

    #[error("outcomes mix SRS and SRSQ replications")]
    MixedMethods,

    #[error("summaries are not comparable: {0}")]
    IncomparableSummaries(String),

    #[error("permutation set error: {0}")]
    PermutationSetError(String),

    #[error("missing results: {0}")]
    MissingResults(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

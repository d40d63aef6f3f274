use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("missing required column `{0}`")]
    MissingColumn(String),

    #[error("duplicate person_id `{0}`")]
    DuplicateId(String),

    #[error("person `{child}` links to unknown parent `{parent}`")]
    UnknownLink { child: String, parent: String },

    #[error("income window resolves to no years")]
    EmptyWindow,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate regressor in {0}")]
    DegenerateRegressor(String),

    #[error("{what}: need at least {needed} observations, got {got}")]
    TooFewObservations { what: String, needed: usize, got: usize },

    #[error("{gender} occupation shares sum to {sum}, expected 1")]
    SharesNotNormalized { gender: String, sum: f64 },

    #[error("share vectors have different lengths ({0} vs {1})")]
    ShareLengthMismatch(usize, usize),

    #[error("degenerate break level: observed rate at the break year is 1")]
    DegenerateBreakLevel,

    #[error("year {0} is missing from the series")]
    MissingYear(i32),

    #[error("uninformative anchor proxy: cov(outcome, anchor) is zero")]
    UninformativeAnchor,

    #[error("collinear proxy `{column}` (spanned by {with:?})")]
    Collinear { column: String, with: Vec<String> },

    #[error("index undefined: aggregate LW coefficient is zero")]
    IndexUndefined,

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("non-finite loss at iteration {iteration}; trace: {trace}")]
    NonFiniteLoss { iteration: usize, trace: String },

    #[error("cohort sets do not match: {0}")]
    CohortMismatch(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }
}

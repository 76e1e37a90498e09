use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: missing value in column `{column}`")]
    MissingCell { row: usize, column: String },
    #[error("row {row}, column `{column}`: cannot parse `{value}` as a number")]
    ParseCell {
        row: usize,
        column: String,
        value: String,
    },
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("column `{0}` is constant and cannot be standardized")]
    ConstantColumn(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("treatment group {0} has no observations")]
    EmptyGroup(usize),
    #[error("fold {fold} contains no observations with treatment {label}; use fewer folds")]
    FoldMissingLevel { fold: usize, label: usize },
    #[error("rank-deficient refit design; collinear columns: {}", .0.join(", "))]
    RankDeficient(Vec<String>),
    #[error(
        "separation detected: coefficient on `{column}` reached {value:.3}; \
         consider a penalized fit or dropping the column"
    )]
    Separation { column: String, value: f64 },
    #[error("every comparison unit was trimmed")]
    AllTrimmed,
    #[error("invalid contrast `{0}`")]
    Contrast(String),
    #[error("restricted-eigenvalue search needs p <= 200, got p = {0}; use sparse_eig on a support instead")]
    TooLarge(usize),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors caused by the input data or configuration rather than
    /// numerical trouble.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Separation { .. } | Error::RankDeficient(_))
    }
}

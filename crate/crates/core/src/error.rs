use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid population: {0}")]
    InvalidPopulation(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("inversion failed: {0}")]
    Inversion(String),

    #[error("design failed for bin {bin} (pi target {pi_target}): {reason}")]
    Design {
        bin: usize,
        pi_target: f64,
        reason: String,
    },

    #[error("singular design matrix: column {column} is (numerically) collinear with earlier columns")]
    SingularDesign { column: usize },

    #[error("degrees of freedom: {0}")]
    DegreesOfFreedom(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("binning error: {0}")]
    Binning(String),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

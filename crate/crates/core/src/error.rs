use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("schema error: missing column `{0}`")]
    Schema(String),

    #[error("parse error at row {row}, column `{column}`: cannot read {value:?} as a number")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },

    #[error("training diverged at epoch {epoch}: non-finite {what}")]
    Divergence { epoch: usize, what: &'static str },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("bound undefined: {0}")]
    UndefinedBound(String),

    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

//! Error categories shared across the pipeline.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input tables do not match the expected schema (missing file, missing
    /// required column, unreadable header).
    #[error("schema error: {0}")]
    Schema(String),

    /// No stay survived the cohort filters; the message carries per-reason
    /// exclusion counts.
    #[error("empty cohort: {0}")]
    EmptyCohort(String),

    /// Invalid configuration value or inconsistent run setup.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or contract-violating data encountered mid-pipeline.
    #[error("data error: {0}")]
    Data(String),

    /// A metric has no defined value for the given inputs (e.g. single-class
    /// label sets).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("ingestion error in {file} row {row}: {message}")]
    Ingest {
        file: String,
        row: usize,
        message: String,
    },

    #[error("series for city {city} feature `{feature}` has {present} present values; at least 2 required")]
    SparseSeries {
        city: usize,
        feature: &'static str,
        present: usize,
    },

    #[error("series has {present} present values; at least 2 required")]
    TooFewValues { present: usize },

    #[error("panel has {hours} hours but at least {required} are required")]
    TooShort { hours: usize, required: usize },

    #[error("{0} samples are too few to split; at least 10 required")]
    TooFewSamples(usize),

    #[error("cities {0} and {1} are coincident; edge weight 1/d is undefined")]
    CoincidentCities(usize, usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite {what} at epoch {epoch}, batch {batch} (max gradient norm {max_grad_norm})")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        batch: usize,
        max_grad_norm: f64,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

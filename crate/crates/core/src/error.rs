use std::path::PathBuf;

use thiserror::Error;

use crate::dataset::{ImageId, PlantId};

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid image {id}: {reason}")]
    InvalidImage { id: ImageId, reason: String },

    #[error("no plant statistics for plant {0}")]
    MissingPlantStats(PlantId),

    #[error("plant {0} has no images")]
    EmptyPlant(PlantId),

    #[error("cannot split a dataset with {0} module(s); at least 2 are required")]
    TooFewModules(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("degenerate embedding: cannot normalize a zero vector")]
    DegenerateEmbedding,

    #[error("degenerate batch: {normal} normal and {anomalous} anomalous samples")]
    DegenerateBatch { normal: usize, anomalous: usize },

    #[error(
        "training aborted at step {step}: {retries} consecutive batches lacked one of the two \
         classes; use stratified sampling for sources with few anomalies"
    )]
    TooManyDegenerateBatches { step: u64, retries: usize },

    #[error("stratified sampling requires at least one anomalous and one normal source image")]
    NoAnomaliesForStratified,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("k = {k} is out of range for an index of {count} embeddings")]
    KOutOfRange { k: usize, count: usize },

    #[error("embedding dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("cannot compress: {0}")]
    Compression(String),

    #[error("predictions span more than one module ({0} and {1})")]
    MixedModules(u32, u32),

    #[error("{metric} is undefined: {reason}")]
    UndefinedMetric { metric: &'static str, reason: String },

    #[error("non-finite gradient at step {step}; lower the learning rate or check the input data")]
    Diverged { step: u64 },

    #[error("threshold {0} is outside [0, 1]")]
    ThresholdOutOfRange(f64),

    #[error("malformed {kind} file {path}: {reason}")]
    Format { kind: &'static str, path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(kind: &'static str, path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Format { kind, path: path.into(), reason: reason.to_string() }
    }
}

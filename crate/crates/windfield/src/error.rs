use thiserror::Error;

/// Errors produced across the pipeline stages.
#[derive(Error, Debug)]
pub enum WindError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("duplicate sample: station {station} at {timestamp}")]
    Duplicate { station: String, timestamp: String },
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("imputation error: no available neighbour for station {station} at time index {time}")]
    Imputation { station: usize, time: usize },
    #[error("completeness error: {0}")]
    Completeness(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("singularity error: {0}")]
    Singular(String),
    #[error("selection error: {0}")]
    Selection(String),
    #[error("degrees-of-freedom error: effective df {df} >= n {n}")]
    DegreesOfFreedom { df: f64, n: usize },
    #[error("ensemble-size error: M = {0}, need at least 2 members")]
    EnsembleSize(usize),
    #[error("extent error: point ({0}, {1}) outside grid extent")]
    Extent(f64, f64),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("fit error: {0}")]
    Fit(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, WindError>;

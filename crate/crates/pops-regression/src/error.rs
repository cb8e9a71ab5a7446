use thiserror::Error;

/// Crate-wide error type. Variants are grouped by origin: data loading and
/// validation, fitting, and the ensemble/minimizer stages.
#[derive(Error, Debug)]
pub enum Error {
    #[error("column {0:?} not found in CSV header")]
    MissingColumn(String),

    #[error("row {row}, column {column:?}: value {value:?} does not parse as a finite real")]
    NonFiniteValue {
        row: usize,
        column: String,
        value: String,
    },

    #[error("row {0}: all features are zero but the target is nonzero; no parameter can fit it")]
    EmptyPopsRow(usize),

    #[error("CSV has a header but no data rows")]
    EmptyFile,

    #[error("invalid configuration: {0}")]
    InvalidSpec(String),

    #[error("split with test fraction {fraction} leaves an empty part (n = {n})")]
    DegenerateSplit { fraction: f64, n: usize },

    #[error("normal system is singular: rank-deficient features with zero prior precision")]
    SingularSystem,

    #[error("row {row}: leverage {leverage:.3e} below 1e-12; POPS row is numerically empty")]
    LeverageUnderflow { row: usize, leverage: f64 },

    #[error("loss residual variance is zero: model is specified, ensemble mass is degenerate")]
    SpecifiedModel,

    #[error("mass matrix column {0} has no finite entry; every member underflowed")]
    DegenerateColumn(usize),

    #[error("regularization scale too small: {context} became non-finite; increase sigma_scale")]
    ScaleTooSmall { context: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("reference minimizer is desk-scale only: requires P <= 8 and N <= 1000, got P = {p}, N = {n}")]
    DeskScaleExceeded { n: usize, p: usize },

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),

    #[error("linear algebra backend: {0}")]
    Linalg(#[from] ndarray_linalg::error::LinalgError),
}

pub type Result<T> = std::result::Result<T, Error>;

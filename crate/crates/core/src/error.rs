use thiserror::Error;

#[derive(Debug, Error)]
pub enum KnnError {
    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("invalid genotype value {value:?} at row {row}, column {col}")]
    Value {
        row: usize,
        col: usize,
        value: String,
    },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("quality control removed every SNP")]
    EmptyResult,

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    Asymmetric { asymmetry: f64 },

    #[error("unsupported output kernel degree {0}; only degrees 1 and 2 are expanded")]
    UnsupportedDegree(u32),

    #[error(
        "unidentifiable basis: components {dependent:?} are linearly dependent (rcond {rcond:e})"
    )]
    Unidentifiable { dependent: Vec<String>, rcond: f64 },

    #[error("degenerate design: rank(Z) = {rank} leaves no residual space for n = {n}")]
    DegenerateDesign { rank: usize, n: usize },

    #[error("covariance matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("unknown {kind} {name:?}; valid names: {valid}")]
    UnknownName {
        kind: &'static str,
        name: String,
        valid: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, KnnError>;

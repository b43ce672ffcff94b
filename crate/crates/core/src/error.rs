use thiserror::Error;

/// Errors surfaced by the estimation and simulation routines.
#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("basis matrix {index} is not symmetric (relative deviation {deviation:.3e})")]
    AsymmetricBasis { index: usize, deviation: f64 },

    #[error("basis Gram matrix is not positive definite (smallest eigenvalue {min_eig:.3e})")]
    NonPdGram { min_eig: f64 },

    #[error("matrix is not an orthogonal projection (deviation {deviation:.3e})")]
    NotAProjection { deviation: f64 },

    #[error("reduced covariance is singular at theta = {theta:?}")]
    SingularReduced { theta: Vec<f64> },

    #[error("rank-deficient input in {context}")]
    RankDeficient { context: String },

    #[error("collinear design in {context}: near-null direction {direction:?}")]
    Collinear {
        context: String,
        direction: Vec<f64>,
    },

    #[error("leave-one-out leverage of sample {sample} is 1 within tolerance")]
    LeverageOne { sample: usize },

    #[error("zero vector passed to {context}")]
    ZeroVector { context: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("unmatched ids in {context}: {ids:?}")]
    UnmatchedIds { context: String, ids: Vec<String> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("malformed file {path}: {reason}")]
    Parse { path: String, reason: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

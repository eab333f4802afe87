use nalgebra::DMatrix;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not antisymmetric (max |A + A^T| = {asymmetry:.3e})")]
    NotAntisymmetric { asymmetry: f64 },

    #[error("matrix is not symmetric (max |A - A^T| = {asymmetry:.3e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("symplectic form is degenerate (|det| = {det:.3e} <= tol {tol:.3e})")]
    DegenerateForm { det: f64, tol: f64 },

    #[error("quadratic form is not positive definite (min eigenvalue {min_eigenvalue:.3e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },

    #[error("subspace basis columns are not independent (rank {rank} < {cols})")]
    DependentColumns { rank: usize, cols: usize },

    #[error("form restricted to the subspace is degenerate (|det Gram| = {det:.3e}); Gram matrix attached")]
    DegenerateRestriction { det: f64, gram: DMatrix<f64> },

    #[error("metric is singular at q = {point:?} (reciprocal condition estimate {rcond:.3e})")]
    SingularMetric { point: Vec<f64>, rcond: f64 },

    #[error("magnetic 2-form is degenerate at q = {point:?} (|det| = {det:.3e})")]
    DegenerateMagnetic { point: Vec<f64>, det: f64 },

    #[error("point {point:?} lies outside the chart domain")]
    OutsideChart { point: Vec<f64> },

    #[error("resonance class index {index} out of range (q = {classes})")]
    ClassOutOfRange { index: usize, classes: usize },

    #[error("empty sample list")]
    EmptySamples,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

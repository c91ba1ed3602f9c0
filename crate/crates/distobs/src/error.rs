use num_complex::Complex64;
use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),
    #[error("shape error: {0}")]
    ShapeError(String),
    #[error("pair is not observable: {0}")]
    NotObservable(String),
    #[error("pair is not detectable: {0}")]
    NotDetectable(String),
    #[error("numerical error: {0}")]
    NumericalError(String),
    #[error("invalid transformation: {0}")]
    InvalidTransform(String),
    #[error(
        "ill-conditioned Jordan structure at eigenvalue {}: {detail}; \
         the Condition-1 scheme needs no Jordan form and may be used instead",
        crate::conditions::fmt_lambda(*lambda)
    )]
    IllConditionedJordan { lambda: Complex64, detail: String },
    #[error("nodes not reachable from the roots: {0:?}")]
    NotSpanning(Vec<usize>),
    #[error(
        "Condition 2 infeasible for eigenvalue {}: no spanning forest from its root nodes",
        crate::conditions::fmt_lambda(*.0)
    )]
    Condition2Infeasible(Complex64),
    #[error("Condition 1 infeasible: {0}")]
    Condition1Infeasible(String),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("invalid switching signal: {0}")]
    InvalidSignal(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("internal consistency failure: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;

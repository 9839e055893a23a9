use thiserror::Error;

/// Errors raised anywhere in model construction, fitting and post-processing.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("value {value} lies outside the basis domain [{lo}, {hi}]")]
    Domain { value: f64, lo: f64, hi: f64 },

    #[error("category {value} outside 1..={categories}")]
    Category { value: f64, categories: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("inconsistent inputs: {0}")]
    Consistency(String),

    #[error("model specification rejected: {0}")]
    Spec(String),

    #[error("non-finite value during evaluation: {0}")]
    Evaluation(String),

    #[error("matrix not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("Newton iteration did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NoConvergence { iterations: usize, grad_norm: f64 },

    #[error("scoring failed: {0}")]
    Scoring(String),
}

pub type Result<T> = std::result::Result<T, Error>;

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("non-finite value at position {index}")]
    NonFinite { index: usize },
    #[error("argument out of domain: {0}")]
    Domain(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("problem size {size} exceeds the limit {limit}")]
    Capacity { size: usize, limit: usize },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("degenerate model: {0}")]
    Degenerate(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("solver stopped after {iterations} iterations with relative residual {residual:e}")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("fit aborted at outer iteration {iteration}: {source}")]
    FitAborted {
        iteration: usize,
        trace: Vec<f64>,
        source: Box<Error>,
    },
}

pub type Result<T> = core::result::Result<T, Error>;

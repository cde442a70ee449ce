use thiserror::Error;

#[derive(Debug, Clone, Error)]
pub enum IotError {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, IotError>;

pub(crate) fn input<T>(msg: impl Into<String>) -> Result<T> {
    Err(IotError::Input(msg.into()))
}

pub(crate) fn numerical<T>(msg: impl Into<String>) -> Result<T> {
    Err(IotError::Numerical(msg.into()))
}

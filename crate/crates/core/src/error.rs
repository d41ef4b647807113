use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("diverged at iteration {t}")]
    Divergence { t: usize },

    #[error("infeasible constants: {0}")]
    Infeasible(String),

    #[error("out of range: {0}")]
    Domain(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

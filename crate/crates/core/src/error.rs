use thiserror::Error;

pub type Result<T> = std::result::Result<T, MilError>;

#[derive(Debug, Error)]
pub enum MilError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid rate {value} for {what}: must lie in [0, 1)")]
    Rate { what: &'static str, value: f64 },
    #[error("index {index} out of range 0..{len}")]
    OutOfRange { index: usize, len: usize },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("trace is missing {0}")]
    Trace(&'static str),
    #[error("training diverged at epoch {epoch}, bag {bag_id}: loss {loss}")]
    Diverged {
        epoch: usize,
        bag_id: String,
        loss: f64,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

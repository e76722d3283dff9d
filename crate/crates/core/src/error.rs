use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op} did not converge after {iterations} iterations (last value {last})")]
    Convergence {
        op: &'static str,
        iterations: usize,
        last: f64,
    },

    #[error("degenerate input to {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("invalid network spec: {}", .0.join("; "))]
    InvalidSpec(Vec<String>),

    #[error("non-finite value produced at layer {layer}")]
    Overflow { layer: usize },

    #[error("non-finite input rejected by {0}")]
    NonFinite(&'static str),

    #[error("resource guard exceeded: {0}")]
    Resource(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible shapes detected while building a graph node.
    #[error("shape error at {node}: {msg}")]
    Shape { node: String, msg: String },
    /// Non-finite value or failed numeric procedure.
    #[error("numeric error at {node}: {msg}")]
    Numeric { node: String, msg: String },
    /// Bad runtime input (out-of-range label, empty batch, ...).
    #[error("invalid input: {0}")]
    Input(String),
    /// Invalid configuration (unknown id, missing hyperparameter, ...).
    #[error("configuration error: {0}")]
    Config(String),
    /// Malformed binary file.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    /// Malformed text record.
    #[error("format error at line {line}: {msg}")]
    MalformedLine { line: usize, msg: String },
    /// Importance weights have (near-)zero variance, the score is undefined.
    #[error("degenerate variance in importance weights")]
    DegenerateVariance,
    /// No usable trial came out of a search.
    #[error("search failed: {0}")]
    Search(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(node: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Shape { node: node.into(), msg: msg.into() }
    }

    pub fn numeric(node: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Numeric { node: node.into(), msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    Vocab { id: usize, size: usize },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("configuration error: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("incompatible checkpoint and dataset: {0}")]
    Incompatible(String),

    #[error("non-finite loss {loss} at step {step} (batch index {batch_index}, example {example_index})")]
    NonFinite {
        step: u64,
        batch_index: usize,
        example_index: usize,
        loss: f64,
    },

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}

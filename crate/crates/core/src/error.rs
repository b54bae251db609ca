use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("softmax error: {0}")]
    Softmax(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("prompt length {len} exceeds the model's {max} positions")]
    ContextLength { len: usize, max: usize },

    #[error("layer {layer} has no attention trace; enable tracing for that layer")]
    TraceMissing { layer: usize },

    #[error("token budget {k} out of range: {reason}")]
    Budget { k: usize, reason: String },

    #[error("unknown {kind} `{value}`")]
    UnknownId { kind: &'static str, value: String },

    #[error("reduction hook broke an invariant: {0}")]
    Hook(String),

    #[error("weights file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

/// Crate-wide error type shared by the learner, embedding, episode, and
/// meta-training layers.
#[derive(Debug, Error)]
pub enum FewshotError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("class {class} has no support examples")]
    DegenerateClass { class: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite input: {0}")]
    NonFiniteInput(String),
    #[error("tape does not match this call: {0}")]
    StaleTape(String),
    #[error("split holds {available} classes but the episode needs {requested}")]
    InsufficientClasses { available: usize, requested: usize },
    #[error("class {class} holds {available} items but the episode needs {requested}")]
    InsufficientItems {
        class: usize,
        available: usize,
        requested: usize,
    },
    #[error("parse error at {location}: {message}")]
    ParseError { location: String, message: String },
    #[error("class {class} appears in more than one split")]
    SplitOverlap { class: usize },
    #[error("scores contain NaN")]
    NonFiniteScores,
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Solver(#[from] diffqp::QpError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

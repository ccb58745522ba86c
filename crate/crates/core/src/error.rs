use thiserror::Error;

/// Errors produced anywhere in the attack pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("non-finite values in {0}")]
    NonFiniteInput(String),

    #[error("missing binding for graph input `{0}`")]
    MissingBinding(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("vanished gradients: every alignment eigenvalue is below the null floor")]
    VanishedGradients,

    #[error("no usable views: {0}")]
    NoViews(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at {context}: {detail}")]
    Shape { context: String, detail: String },

    #[error("unbound graph input `{0}`")]
    UnboundInput(String),

    #[error("loss node {node} is not scalar (shape {shape:?})")]
    NonScalarLoss { node: usize, shape: Vec<usize> },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("layer {layer} is not linear ({kind}); use saliency_beta for nonlinear models")]
    NonlinearLayer { layer: usize, kind: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed data at byte {offset}: {detail}")]
    Malformed { offset: usize, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(context: impl Into<String>, detail: impl Into<String>) -> Error {
    Error::Shape {
        context: context.into(),
        detail: detail.into(),
    }
}

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("shape mismatch at node `{node}`: {detail}")]
    Shape { node: String, detail: String },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("unbound input `{0}`")]
    UnboundInput(String),
    #[error("no input named `{0}`")]
    UnknownInput(String),
    #[error("no parameter named `{0}`")]
    UnknownParam(String),
    #[error("duplicate node name `{0}`")]
    DuplicateName(String),
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error("domain error at node `{node}`: {detail}")]
    Domain { node: String, detail: String },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("gradient for `{name}` has shape {got:?}, parameter has {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),
}

use thiserror::Error;

/// Errors raised by the engine, the DSP front end, the model and the file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },
    #[error("non-finite gradient while back-propagating through `{op}`")]
    NonFiniteGrad { op: &'static str },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("axis layout violation: {0}")]
    Layout(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("audio input error: {0}")]
    Audio(String),
    #[error("weights error: {0}")]
    Weights(String),
    #[error("non-finite loss component `{0}`")]
    NonFiniteLoss(&'static str),
    #[error("training step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Shape { op, detail: detail.into() })
}

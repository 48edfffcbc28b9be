use alloc::string::String;

/// Errors produced by the core pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("subject mask has no voxels set")]
    EmptyMask,
    #[error("atlas `{0}` has no non-background labels")]
    EmptyLabelSpace(String),
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },
    #[error("non-finite value in `{0}`")]
    NonFinite(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("language model contract violated: {0}")]
    LmContract(String),
    #[error("scoring failed on sample {sample}: {reason}")]
    Scoring { sample: usize, reason: String },
    #[error("generator protocol error: {0}")]
    Protocol(String),
    #[error("generator transport error: {0}")]
    Transport(String),
    #[error("not implemented: {0}")]
    NotImplemented(&'static str),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.into(),
            got: got.into(),
        }
    }

    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid-input",
            Error::EmptyMask => "empty-mask",
            Error::EmptyLabelSpace(_) => "empty-label-space",
            Error::ShapeMismatch { .. } => "shape-mismatch",
            Error::NonFinite(_) => "non-finite",
            Error::EmptyCorpus => "empty-corpus",
            Error::LmContract(_) => "lm-contract",
            Error::Scoring { .. } => "scoring",
            Error::Protocol(_) => "protocol",
            Error::Transport(_) => "transport",
            Error::NotImplemented(_) => "not-implemented",
        }
    }
}

pub type Result<T> = core::result::Result<T, Error>;

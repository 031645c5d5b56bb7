use alloc::string::String;

/// Errors raised by the fusion core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape error at `{node}`: {detail}")]
    Shape { node: &'static str, detail: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("clip `{clip_id}`: {reason}")]
    Clip { clip_id: String, reason: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("too few episodes: have {have}, need at least {need}")]
    TooFewEpisodes { have: usize, need: usize },

    #[error("coral needs batch >= 2 (got {0})")]
    CoralBatch(usize),

    #[error("degenerate: zero variance")]
    ZeroVariance,

    #[error("non-finite value produced at `{0}`")]
    NonFinite(&'static str),

    #[error("training diverged at epoch {epoch}: non-finite {what}")]
    Divergence { epoch: usize, what: &'static str },
}

impl Error {
    pub(crate) fn shape(node: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            node,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T> = core::result::Result<T, Error>;

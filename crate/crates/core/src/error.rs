use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("variables belong to different tapes")]
    TapeMismatch,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss does not depend on any parameter that requires a gradient")]
    DetachedLoss,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("loss became non-finite in epoch {epoch}; batch sample seeds {seeds:?}")]
    NonFiniteLoss { epoch: usize, seeds: Vec<u64> },

    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("cannot parse value `{value}` for key `{key}`")]
    InvalidValue { key: String, value: String },

    #[error("constraint violated for key `{key}`: {reason}")]
    Constraint { key: String, reason: String },

    #[error("malformed config line {line}: `{text}`")]
    Syntax { line: usize, text: String },
}

#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("bad magic bytes (expected KAGP)")]
    BadMagic,

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("checkpoint truncated")]
    Truncated,

    #[error("malformed checkpoint: {0}")]
    Malformed(String),

    #[error("checkpoint is missing record `{0}`")]
    MissingField(String),
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

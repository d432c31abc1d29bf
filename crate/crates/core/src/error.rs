use thiserror::Error;

pub type Result<T, E = EtrError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum EtrError {
    #[error("unsupported character {ch:?} at offset {offset}")]
    UnsupportedChar { ch: char, offset: usize },

    #[error("token id {0} is out of range")]
    TokenOutOfRange(u32),

    #[error("token id {0}: control token not renderable as content")]
    NotRenderable(u32),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("empty response: loss undefined")]
    EmptyResponse,

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("non-finite value encountered at step {step}")]
    NonFinite { step: usize },

    #[error("domain {domain} exhausted: only {achievable} distinct items achievable")]
    DomainExhausted { domain: String, achievable: usize },

    #[error("unknown domain {0:?}")]
    UnknownDomain(String),

    #[error("malformed {domain} query {query:?}")]
    MalformedQuery { domain: String, query: String },

    #[error("expert {expert} has an empty query set")]
    EmptyQuerySet { expert: String },

    #[error("requested {requested} queries for expert {expert} but only {available} available")]
    InsufficientQueries {
        expert: String,
        requested: usize,
        available: usize,
    },

    #[error("fingerprint mismatch: head trained against {expected}, backbone is {found}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("backend {backend} failed at step {step}: {message}")]
    Backend {
        backend: String,
        step: usize,
        message: String,
    },

    #[error("backend {backend} lacks capability {capability}")]
    MissingCapability {
        backend: String,
        capability: &'static str,
    },

    #[error("protocol error in field `{field}`: {message}")]
    Protocol { field: String, message: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl EtrError {
    pub fn format(msg: impl Into<String>) -> Self {
        EtrError::Format(msg.into())
    }

    pub fn protocol(field: impl Into<String>, message: impl Into<String>) -> Self {
        EtrError::Protocol {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        EtrError::InvalidConfig(msg.into())
    }
}

//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by every module of the lab.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not conform to the op's rule.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Input outside an op's mathematical domain (e.g. log of a non-positive value).
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// A caller violated a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Non-finite gradient found while checking a coordinate.
    #[error("non-finite gradient at parameter {param}, coordinate {coord}: analytic={analytic}, numeric={numeric}")]
    NonFiniteGradient {
        param: usize,
        coord: usize,
        analytic: f64,
        numeric: f64,
    },

    /// Sequence does not fit the model's position table.
    #[error("sequence of {len} positions exceeds capacity {max}")]
    Capacity { len: usize, max: usize },

    /// Text contains a symbol outside the vocabulary.
    #[error("unknown token {0:?}")]
    Vocabulary(String),

    /// Invalid configuration value.
    #[error("configuration error: {0}")]
    Config(String),

    /// Operation illegal in the current adapter/model state.
    #[error("state error: {0}")]
    State(String),

    /// A language could not be routed to a group.
    #[error("routing error: {0}")]
    Routing(String),

    /// A group configuration failed validation.
    #[error("group validation error: {0}")]
    Validation(String),

    /// Language lookup failed.
    #[error("lookup error: {0}")]
    Lookup(String),

    /// Input data was unusable.
    #[error("data error: {0}")]
    Data(String),

    /// A record file line could not be parsed.
    #[error("parse error at {path}:{line}: {detail}")]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    /// A checkpoint is truncated or its digest does not match.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// A checkpoint was written by an incompatible format version.
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    /// Training stages requested out of order.
    #[error("sequencing error: {0}")]
    Sequencing(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }

    /// Whether the error stems from invalid user configuration rather than a runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Validation(_) | Error::Routing(_) | Error::Sequencing(_)
        )
    }

    /// Short machine-greppable class name.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Domain { .. } => "domain",
            Error::Contract(_) => "contract",
            Error::NonFiniteGradient { .. } => "gradient",
            Error::Capacity { .. } => "capacity",
            Error::Vocabulary(_) => "vocabulary",
            Error::Config(_) => "config",
            Error::State(_) => "state",
            Error::Routing(_) => "routing",
            Error::Validation(_) => "validation",
            Error::Lookup(_) => "lookup",
            Error::Data(_) => "data",
            Error::Parse { .. } => "parse",
            Error::Integrity(_) => "integrity",
            Error::Version { .. } => "version",
            Error::Sequencing(_) => "sequencing",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

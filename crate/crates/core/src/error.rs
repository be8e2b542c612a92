use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid error parameters: rho01={rho01}, rho10={rho10} (need both >= 0 and rho01+rho10 < 1 - {margin})")]
    InvalidErrorParams { rho01: f64, rho10: f64, margin: f64 },

    #[error("value {value} outside domain: {what}")]
    Domain { what: &'static str, value: f64 },

    #[error("shape mismatch for {what}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("{0} required")]
    MissingComponent(&'static str),

    #[error("observed set is empty")]
    EmptyObservedSet,

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("target must be positive, got {0}")]
    NonPositiveTarget(f64),

    #[error("training diverged at epoch {epoch}: {what}")]
    Divergence { epoch: usize, what: String },

    #[error("labels contain a single class")]
    SingleClass,

    #[error("no user has a positive label")]
    NoEligibleUsers,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config field `{field}`: {msg}")]
    InvalidConfig { field: String, msg: String },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            msg: msg.into(),
        }
    }

    /// True for errors caused by bad input rather than a failed computation.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Divergence { .. } | Error::Io(_))
    }
}

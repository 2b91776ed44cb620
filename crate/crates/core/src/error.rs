use thiserror::Error;

use crate::invariants::InvariantViolation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad user input: dimensions, parameters, malformed config.
    #[error("configuration error: {0}")]
    Config(String),
    /// Non-finite values or numerically impossible quantities.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Internal contract broken (index out of range, inconsistent state).
    #[error("logic error: {0}")]
    Logic(String),
    /// Runtime-checked claim failed while asserting invariants.
    #[error("invariant violation: {}", summarize(.0))]
    Invariant(Vec<InvariantViolation>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn logic(msg: impl Into<String>) -> Self {
        Error::Logic(msg.into())
    }
}

fn summarize(violations: &[InvariantViolation]) -> String {
    match violations.first() {
        None => "no details".to_string(),
        Some(first) if violations.len() == 1 => first.to_string(),
        Some(first) => format!("{first} (and {} more)", violations.len() - 1),
    }
}

use thiserror::Error;

/// Errors raised by the environment model and every diagnostic built on it.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("distribution at {context} is not normalized (sum = {sum}, min = {min})")]
    Normalization { context: String, sum: f64, min: f64 },

    #[error("no table row for reachable context {0}")]
    MissingContext(String),

    #[error("{paths} enumerated paths exceed the exact-mode budget of {budget}")]
    BudgetExceeded { paths: f64, budget: f64 },

    #[error("conditioning state {0} has zero probability")]
    UndefinedConditional(String),

    #[error("zero denominator at {0}")]
    ZeroDenominator(String),

    #[error("support violation at {0}")]
    SupportViolation(String),

    #[error("unknown policy tag `{0}`")]
    UnknownPolicy(String),

    #[error("context {0} has no observations and smoothing is disabled")]
    UnseenContext(String),

    #[error("growth-rate fit needs at least two points, got {0}")]
    DegenerateFit(usize),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("{} validation error(s): {}", .0.len(), summarize(.0))]
    Validation(Vec<Error>),
}

fn summarize(errors: &[Error]) -> String {
    errors
        .iter()
        .map(|e| e.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    /// Flattens a `Validation` bundle into its individual violations.
    pub fn violations(&self) -> Vec<&Error> {
        match self {
            Error::Validation(all) => all.iter().collect(),
            other => vec![other],
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

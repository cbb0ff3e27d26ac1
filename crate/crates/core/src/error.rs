use thiserror::Error;

use crate::model::Violation;

pub type Result<T> = std::result::Result<T, SmdsError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SmdsError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: String,
        got: String,
    },

    #[error("model failed validation: {}", format_violations(.0))]
    InvalidModel(Vec<Violation>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed model document: {0}")]
    Document(String),

    #[error("matrix is not positive definite after jitter escalation ({what})")]
    NotPositiveDefinite { what: String },

    #[error("rate overflow: log-rate {log_rate:.3} exceeds {limit} for neuron {neuron} at step {step}")]
    RateOverflow {
        neuron: usize,
        step: usize,
        log_rate: f64,
        limit: f64,
    },

    #[error("numerical failure at step {step}: {what}")]
    Numeric { step: usize, what: String },

    #[error("series is empty")]
    EmptySeries,

    #[error("{0}")]
    Unsupported(String),
}

impl SmdsError {
    pub(crate) fn dim(context: &str, expected: impl ToString, got: impl ToString) -> Self {
        SmdsError::Dimension {
            context: context.to_string(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// Attaches a time index to errors that do not carry one yet.
    pub(crate) fn at_step(self, step: usize) -> Self {
        match self {
            SmdsError::NotPositiveDefinite { what } => SmdsError::Numeric { step, what },
            SmdsError::RateOverflow {
                neuron,
                log_rate,
                limit,
                ..
            } => SmdsError::RateOverflow {
                neuron,
                step,
                log_rate,
                limit,
            },
            other => other,
        }
    }
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

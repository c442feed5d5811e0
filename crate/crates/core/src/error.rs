use thiserror::Error;

use crate::adversary::ScheduleViolation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    /// A scenario file failed to parse or validate. `field` names the offending key.
    #[error("scenario field `{field}`: {reason}")]
    Scenario { field: String, reason: String },

    #[error("corruption schedule violates the fault bound: {0}")]
    Schedule(ScheduleViolation),

    /// The churn plan would leave the system unable to publish its configuration.
    #[error("unpublishable churn: {0}")]
    Unpublishable(String),

    #[error("invariant `{name}` violated at t={at:.3}s: {detail}")]
    Invariant {
        name: &'static str,
        at: f64,
        detail: String,
    },

    #[error("gas calibration: {0}")]
    Calibration(String),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn scenario(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Scenario {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

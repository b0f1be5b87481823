use thiserror::Error;

/// Errors from the physics and rate model.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    /// An argument lies outside the domain of the function.
    #[error("domain error: {0}")]
    Domain(String),
    /// A configuration violates a component invariant.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// Full interception would not raise the error rate, so observed errors
    /// cannot be attributed.
    #[error("attack undetectable: intercept/resend QBER is zero but observed QBER is {q_obs}")]
    AttackUndetectable { q_obs: f64 },
    #[error("calibration failed: {0}")]
    Calibration(String),
}

pub(crate) fn require(cond: bool, msg: impl FnOnce() -> String) -> Result<(), ModelError> {
    if cond {
        Ok(())
    } else {
        Err(ModelError::Config(msg()))
    }
}

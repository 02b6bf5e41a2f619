use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid phase-type distribution: {0}")]
    InvalidPhaseType(String),

    #[error("invalid rate: {0}")]
    InvalidRate(String),

    #[error("state is not a valid occupancy state: {0}")]
    Domain(String),

    #[error("integrator diverged at step {step} (t = {t}): {reason}")]
    Divergence { step: u64, t: f64, reason: String },

    #[error("no fixed point for arrival rate {0}: the load must be below 1")]
    NoFixedPoint(f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty sample: {0}")]
    EmptySample(String),

    #[error("trajectories cannot be aligned: {0}")]
    Alignment(String),
}

pub type Result<T> = std::result::Result<T, Error>;

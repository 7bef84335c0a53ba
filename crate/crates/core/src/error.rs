use std::fmt;

/// Errors raised by the logit-space primitives and experiments.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LcoError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("KL divergence undefined: q[{index}] = 0 while p[{index}] > 0")]
    DivergenceUndefined { index: usize },

    #[error(
        "degenerate ratio: behavioral probability {pi_old:e} of the sampled action is below 1e-300"
    )]
    DegenerateRatio { pi_old: f64 },

    #[error("PPO point is in the clipped region (ratio {ratio}, advantage {advantage})")]
    InactiveRegion { ratio: f64, advantage: f64 },

    #[error("finite-difference stencil crosses the PPO clip boundary (ratio {ratio} at offset {offset:?})")]
    Kink { ratio: f64, offset: (usize, usize) },

    #[error("no negative-curvature witness found after {trials} trials")]
    WitnessSearchFailed { trials: usize },

    #[error("estimator domain error: log-probability at index {index} is {value}")]
    EstimatorDomain { index: usize, value: f64 },

    #[error("invalid state {0:?}")]
    InvalidState(Vec<usize>),

    #[error("step size too large: spectral radius {rho} >= 1")]
    StepSizeTooLarge { rho: f64 },

    #[error("non-finite gradient at step {step}: {detail}")]
    NonFiniteGradient { step: usize, detail: String },
}

impl LcoError {
    pub(crate) fn invalid(msg: impl fmt::Display) -> Self {
        LcoError::InvalidInput(msg.to_string())
    }
}

pub type Result<T> = std::result::Result<T, LcoError>;

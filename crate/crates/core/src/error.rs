use thiserror::Error;

/// One concrete defect found in model data, e.g. a kernel row that does not
/// sum to one. `place` names the offending entry in model coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub place: String,
    pub problem: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.place, self.problem)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model data at {0}")]
    Invalid(Violation),

    #[error("observation {observation} has probability {mass:.3e} at time {time}; cannot condition on it")]
    ZeroProbabilityBranch { time: usize, observation: usize, mass: f64 },

    #[error("flow horizons differ: {left} vs {right}")]
    HorizonMismatch { left: usize, right: usize },

    #[error("flow too short: need measures for t = 0..={needed}, got {got}")]
    FlowTooShort { needed: usize, got: usize },

    #[error("belief tree exceeded the node budget of {budget} at depth {depth} of {horizon}")]
    NodeBudget { budget: usize, depth: usize, horizon: usize },

    #[error("policy has no action for a reachable belief at time {time}")]
    PolicyMissingNode { time: usize },

    #[error("simulation horizon {requested} exceeds the policy horizon {policy}")]
    HorizonBeyondPolicy { requested: usize, policy: usize },

    #[error("observation kernel depends on the mean field; the population simulator requires it fixed")]
    MeanFieldObservation,

    #[error("config error: {0}")]
    Config(String),

    #[error("internal invariant broken: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

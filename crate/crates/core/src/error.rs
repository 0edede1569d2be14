use thiserror::Error;

/// Errors raised by the game model, learners and verification oracles.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid game: {0}")]
    InvalidGame(String),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("environment produced an invalid response: {0}")]
    InvalidResponse(String),

    #[error("linear solve failed: {0}")]
    SolveFailure(String),

    #[error("division by zero initial-state mass at state {state}")]
    DivisionDomain { state: usize },

    #[error("non-finite input to {0}")]
    NonFinite(&'static str),

    #[error("policy has a zero entry (agent {agent}, state {state}, action {action}); multiplicative updates need an interior policy")]
    BoundaryPolicy {
        agent: usize,
        state: usize,
        action: usize,
    },

    #[error("game transitions depend on the joint action (max deviation {deviation:e})")]
    NotAgentIndependent { deviation: f64 },

    #[error("run history is empty")]
    EmptyHistory,

    #[error("enumeration too large: {count} candidates exceeds limit {limit}")]
    TooLarge { count: u128, limit: u128 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("run failed: {0}")]
    Run(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

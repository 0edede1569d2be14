//! Performative Markov potential games.
//!
//! Tabular multi-agent games whose rewards and transitions respond to the
//! deployed joint policy, the independent learners that play them, and the
//! oracles used to check equilibrium and convergence claims.

pub mod environments;
pub mod equilibrium;
pub mod error;
pub mod experiment;
pub mod game;
pub mod learners;
pub mod occupancy_opt;
pub mod sampling;
pub mod seed;
pub mod verify;

pub use equilibrium::{GapReport, RoundRecord, RunHistory};
pub use error::{Error, Result};
pub use game::{EvalResult, JointPolicy, OccupancyMeasure, ResponseMap, TabularGame};
pub use learners::{AlgoConfig, Algorithm, GradientMode};

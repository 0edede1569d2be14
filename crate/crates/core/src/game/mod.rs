//! Tabular Markov games, joint policies, exact evaluation and the performative
//! response map that turns a deployed joint policy into the game it induces.

mod eval;
mod occupancy;
mod policy;
mod response;

pub use eval::{
    marginal_advantage, marginal_q, marginalized_mdp, mismatch_diagnostics, policy_evaluation,
    visitation, EvalResult, MismatchDiagnostics, OptimalSolution, SingleAgentMdp, DEFAULT_SOLVE_TOL,
};
pub use occupancy::{agent_dependence, check_agent_independent, occupancy_from_policy, OccupancyMeasure};
pub(crate) use occupancy::require_agent_independent;
pub use policy::JointPolicy;
pub use response::{ConstantResponse, Response, ResponseMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for the stochasticity checks on kernels, initial distributions and policies.
pub const STRUCTURAL_TOL: f64 = 1e-9;

/// Version tag written into serialized game documents.
pub const GAME_FORMAT_VERSION: u32 = 1;

/// Row-major indexer over the joint action space `A_1 x ... x A_n`.
///
/// Agent 0 is the most significant digit, so joint index `j` enumerates
/// `(a_1, ..., a_n)` in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointActions {
    sizes: Vec<usize>,
    strides: Vec<usize>,
    total: usize,
}

impl JointActions {
    pub fn new(sizes: &[usize]) -> Self {
        let mut strides = vec![1; sizes.len()];
        for k in (0..sizes.len().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * sizes[k + 1];
        }
        let total = sizes.iter().product();
        Self {
            sizes: sizes.to_vec(),
            strides,
            total,
        }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn n_agents(&self) -> usize {
        self.sizes.len()
    }

    /// Number of joint actions.
    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn stride(&self, agent: usize) -> usize {
        self.strides[agent]
    }

    /// Action of `agent` inside joint action `joint`.
    #[inline]
    pub fn action_of(&self, joint: usize, agent: usize) -> usize {
        (joint / self.strides[agent]) % self.sizes[agent]
    }

    pub fn encode(&self, actions: &[usize]) -> usize {
        actions
            .iter()
            .zip(&self.strides)
            .map(|(a, stride)| a * stride)
            .sum()
    }

    pub fn decode(&self, joint: usize) -> Vec<usize> {
        (0..self.sizes.len())
            .map(|k| self.action_of(joint, k))
            .collect()
    }

    /// Replace the action of `agent` in `joint` with `action`.
    #[inline]
    pub fn with_action(&self, joint: usize, agent: usize, action: usize) -> usize {
        let current = self.action_of(joint, agent);
        joint - current * self.strides[agent] + action * self.strides[agent]
    }
}

/// One concrete deployed game: rewards, kernel, discount and initial distribution.
///
/// Rewards are stored per agent as `[s * J + j]`, the kernel as
/// `[(s * J + j) * S + s']`, with `J` the number of joint actions.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularGame {
    joint: JointActions,
    n_states: usize,
    gamma: f64,
    rho: Vec<f64>,
    rewards: Vec<Vec<f64>>,
    kernel: Vec<f64>,
    r_max: f64,
}

impl TabularGame {
    /// Build a game and check every structural invariant.
    pub fn new(
        actions: &[usize],
        n_states: usize,
        gamma: f64,
        rho: Vec<f64>,
        rewards: Vec<Vec<f64>>,
        kernel: Vec<f64>,
    ) -> Result<Self> {
        if actions.is_empty() || actions.contains(&0) {
            return Err(Error::InvalidGame(
                "every agent needs at least one action".into(),
            ));
        }
        if n_states == 0 {
            return Err(Error::InvalidGame("game needs at least one state".into()));
        }
        let joint = JointActions::new(actions);
        let game = Self {
            r_max: rewards
                .iter()
                .flatten()
                .fold(0.0_f64, |acc, r| acc.max(r.abs())),
            joint,
            n_states,
            gamma,
            rho,
            rewards,
            kernel,
        };
        game.validate()?;
        Ok(game)
    }

    pub fn validate(&self) -> Result<()> {
        let s_count = self.n_states;
        let j_count = self.joint.len();
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidGame(format!(
                "discount {} outside [0, 1)",
                self.gamma
            )));
        }
        if self.rho.len() != s_count {
            return Err(Error::InvalidGame(format!(
                "initial distribution has {} entries, expected {s_count}",
                self.rho.len()
            )));
        }
        check_distribution(&self.rho).map_err(|e| Error::InvalidGame(format!("rho: {e}")))?;
        if self.rewards.len() != self.joint.n_agents() {
            return Err(Error::InvalidGame(format!(
                "{} reward tables for {} agents",
                self.rewards.len(),
                self.joint.n_agents()
            )));
        }
        for (i, table) in self.rewards.iter().enumerate() {
            if table.len() != s_count * j_count {
                return Err(Error::InvalidGame(format!(
                    "reward table of agent {i} has {} entries, expected {}",
                    table.len(),
                    s_count * j_count
                )));
            }
            if table.iter().any(|r| !r.is_finite()) {
                return Err(Error::InvalidGame(format!(
                    "reward table of agent {i} has a non-finite entry"
                )));
            }
        }
        if self.kernel.len() != s_count * j_count * s_count {
            return Err(Error::InvalidGame(format!(
                "kernel has {} entries, expected {}",
                self.kernel.len(),
                s_count * j_count * s_count
            )));
        }
        for (row_idx, row) in self.kernel.chunks_exact(s_count).enumerate() {
            check_distribution(row).map_err(|e| {
                Error::InvalidGame(format!(
                    "kernel row (s={}, joint={}): {e}",
                    row_idx / j_count,
                    row_idx % j_count
                ))
            })?;
        }
        Ok(())
    }

    pub fn n_agents(&self) -> usize {
        self.joint.n_agents()
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn actions(&self) -> &[usize] {
        self.joint.sizes()
    }

    pub fn joint(&self) -> &JointActions {
        &self.joint
    }

    pub fn n_joint(&self) -> usize {
        self.joint.len()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    /// Largest absolute reward entry over all agents.
    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    #[inline]
    pub fn reward(&self, agent: usize, state: usize, joint: usize) -> f64 {
        self.rewards[agent][state * self.joint.len() + joint]
    }

    pub fn reward_table(&self, agent: usize) -> &[f64] {
        &self.rewards[agent]
    }

    pub fn rewards(&self) -> &[Vec<f64>] {
        &self.rewards
    }

    /// Next-state distribution for `(state, joint)`.
    #[inline]
    pub fn transition(&self, state: usize, joint: usize) -> &[f64] {
        let start = (state * self.joint.len() + joint) * self.n_states;
        &self.kernel[start..start + self.n_states]
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    /// Same game with a different initial distribution.
    pub fn with_rho(&self, rho: Vec<f64>) -> Result<Self> {
        let mut game = self.clone();
        game.rho = rho;
        game.validate()?;
        Ok(game)
    }

    /// True when `other` has identical agents, states, action sets, discount and `rho`.
    pub fn same_shape(&self, other: &TabularGame) -> bool {
        self.joint == other.joint
            && self.n_states == other.n_states
            && self.gamma.to_bits() == other.gamma.to_bits()
            && self.rho.len() == other.rho.len()
            && self
                .rho
                .iter()
                .zip(&other.rho)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn to_document(&self) -> GameDocument {
        let j_count = self.joint.len();
        GameDocument {
            version: GAME_FORMAT_VERSION,
            n: self.n_agents(),
            states: self.n_states,
            actions: self.actions().to_vec(),
            gamma: self.gamma,
            rho: self.rho.clone(),
            rewards: self
                .rewards
                .iter()
                .map(|table| table.chunks_exact(j_count).map(<[f64]>::to_vec).collect())
                .collect(),
            kernel: self
                .kernel
                .chunks_exact(j_count * self.n_states)
                .map(|per_state| {
                    per_state
                        .chunks_exact(self.n_states)
                        .map(<[f64]>::to_vec)
                        .collect()
                })
                .collect(),
        }
    }

    pub fn from_document(doc: GameDocument) -> Result<Self> {
        if doc.version != GAME_FORMAT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported game format version {}",
                doc.version
            )));
        }
        if doc.actions.len() != doc.n {
            return Err(Error::Parse(format!(
                "header says {} agents but {} action counts given",
                doc.n,
                doc.actions.len()
            )));
        }
        let j_count: usize = doc.actions.iter().product();
        let mut rewards = Vec::with_capacity(doc.rewards.len());
        for per_agent in doc.rewards {
            let mut table = Vec::with_capacity(doc.states * j_count);
            for row in per_agent {
                if row.len() != j_count {
                    return Err(Error::Parse(format!(
                        "reward row has {} joint actions, expected {j_count}",
                        row.len()
                    )));
                }
                table.extend(row);
            }
            rewards.push(table);
        }
        let mut kernel = Vec::with_capacity(doc.states * j_count * doc.states);
        for per_state in doc.kernel {
            for row in per_state {
                if row.len() != doc.states {
                    return Err(Error::Parse(format!(
                        "kernel row has {} successors, expected {}",
                        row.len(),
                        doc.states
                    )));
                }
                kernel.extend(row);
            }
        }
        TabularGame::new(&doc.actions, doc.states, doc.gamma, doc.rho, rewards, kernel)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: GameDocument = serde_json::from_str(text)?;
        Self::from_document(doc)
    }

    /// Rebuild with new reward tables and kernel, keeping the shape. Used by environments.
    pub fn with_tables(&self, rewards: Vec<Vec<f64>>, kernel: Vec<f64>) -> Result<Self> {
        let game = TabularGame::new(
            self.actions(),
            self.n_states,
            self.gamma,
            self.rho.clone(),
            rewards,
            kernel,
        )?;
        Ok(game)
    }
}

/// Versioned JSON layout of a [`TabularGame`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameDocument {
    pub version: u32,
    pub n: usize,
    pub states: usize,
    pub actions: Vec<usize>,
    pub gamma: f64,
    pub rho: Vec<f64>,
    /// `rewards[agent][s][joint_a]`
    pub rewards: Vec<Vec<Vec<f64>>>,
    /// `kernel[s][joint_a][s']`
    pub kernel: Vec<Vec<Vec<f64>>>,
}

pub(crate) fn check_distribution(p: &[f64]) -> std::result::Result<(), String> {
    let mut sum = 0.0;
    for (k, &x) in p.iter().enumerate() {
        if !x.is_finite() || x < 0.0 {
            return Err(format!("entry {k} = {x} is not a nonnegative number"));
        }
        sum += x;
    }
    if (sum - 1.0).abs() > STRUCTURAL_TOL {
        return Err(format!("entries sum to {sum}"));
    }
    Ok(())
}

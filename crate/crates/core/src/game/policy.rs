use serde::{Deserialize, Serialize};

use super::{check_distribution, JointActions, TabularGame};
use crate::error::{Error, Result};

/// Product of per-agent stochastic tabular policies.
///
/// `tables[i][s * A_i + a]` is `pi_i(a | s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointPolicy {
    actions: Vec<usize>,
    n_states: usize,
    tables: Vec<Vec<f64>>,
}

impl JointPolicy {
    pub fn uniform(n_states: usize, actions: &[usize]) -> Self {
        let tables = actions
            .iter()
            .map(|&a| vec![1.0 / a as f64; n_states * a])
            .collect();
        Self {
            actions: actions.to_vec(),
            n_states,
            tables,
        }
    }

    pub fn uniform_for(game: &TabularGame) -> Self {
        Self::uniform(game.n_states(), game.actions())
    }

    pub fn from_tables(n_states: usize, actions: &[usize], tables: Vec<Vec<f64>>) -> Result<Self> {
        let policy = Self {
            actions: actions.to_vec(),
            n_states,
            tables,
        };
        policy.validate()?;
        Ok(policy)
    }

    /// Deterministic joint policy from per-agent action choices `choice[i][s]`.
    pub fn deterministic(n_states: usize, actions: &[usize], choice: &[Vec<usize>]) -> Result<Self> {
        let mut policy = Self::uniform(n_states, actions);
        for (i, per_state) in choice.iter().enumerate() {
            if per_state.len() != n_states {
                return Err(Error::ShapeMismatch(format!(
                    "deterministic choice of agent {i} covers {} states, expected {n_states}",
                    per_state.len()
                )));
            }
            policy.set_agent(i, deterministic_table(n_states, actions[i], per_state)?)?;
        }
        Ok(policy)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tables.len() != self.actions.len() {
            return Err(Error::InvalidPolicy(format!(
                "{} tables for {} agents",
                self.tables.len(),
                self.actions.len()
            )));
        }
        for (i, table) in self.tables.iter().enumerate() {
            let a = self.actions[i];
            if table.len() != self.n_states * a {
                return Err(Error::InvalidPolicy(format!(
                    "agent {i} table has {} entries, expected {}",
                    table.len(),
                    self.n_states * a
                )));
            }
            for (s, row) in table.chunks_exact(a).enumerate() {
                check_distribution(row).map_err(|e| {
                    Error::InvalidPolicy(format!("agent {i}, state {s}: {e}"))
                })?;
            }
        }
        Ok(())
    }

    pub fn n_agents(&self) -> usize {
        self.actions.len()
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn actions(&self) -> &[usize] {
        &self.actions
    }

    #[inline]
    pub fn prob(&self, agent: usize, state: usize, action: usize) -> f64 {
        self.tables[agent][state * self.actions[agent] + action]
    }

    pub fn row(&self, agent: usize, state: usize) -> &[f64] {
        let a = self.actions[agent];
        &self.tables[agent][state * a..(state + 1) * a]
    }

    pub fn table(&self, agent: usize) -> &[f64] {
        &self.tables[agent]
    }

    pub fn tables(&self) -> &[Vec<f64>] {
        &self.tables
    }

    /// Replace one agent's table (checked).
    pub fn set_agent(&mut self, agent: usize, table: Vec<f64>) -> Result<()> {
        if agent >= self.actions.len() {
            return Err(Error::ShapeMismatch(format!("no agent {agent}")));
        }
        let a = self.actions[agent];
        if table.len() != self.n_states * a {
            return Err(Error::ShapeMismatch(format!(
                "agent {agent} table has {} entries, expected {}",
                table.len(),
                self.n_states * a
            )));
        }
        for (s, row) in table.chunks_exact(a).enumerate() {
            check_distribution(row)
                .map_err(|e| Error::InvalidPolicy(format!("agent {agent}, state {s}: {e}")))?;
        }
        self.tables[agent] = table;
        Ok(())
    }

    /// Copy of `self` with agent `agent` replaced by `table`.
    pub fn with_agent(&self, agent: usize, table: Vec<f64>) -> Result<Self> {
        let mut p = self.clone();
        p.set_agent(agent, table)?;
        Ok(p)
    }

    pub fn matches(&self, game: &TabularGame) -> bool {
        self.n_states == game.n_states() && self.actions == game.actions()
    }

    pub fn check_shape(&self, game: &TabularGame) -> Result<()> {
        if self.matches(game) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "policy over {} states with actions {:?}, game has {} states with actions {:?}",
                self.n_states,
                self.actions,
                game.n_states(),
                game.actions()
            )))
        }
    }

    /// Probability of every joint action at `state`, row-major.
    pub fn joint_probs(&self, state: usize) -> Vec<f64> {
        self.product_weights(state, None)
    }

    /// `prod_{k != agent} pi_k(a_k | state)` for every joint action at `state`.
    pub fn opponent_probs(&self, state: usize, agent: usize) -> Vec<f64> {
        self.product_weights(state, Some(agent))
    }

    fn product_weights(&self, state: usize, skip: Option<usize>) -> Vec<f64> {
        let total: usize = self.actions.iter().product();
        let mut weights = Vec::with_capacity(total);
        weights.push(1.0);
        for (k, &a) in self.actions.iter().enumerate() {
            let row = self.row(k, state);
            let mut next = Vec::with_capacity(weights.len() * a);
            for &w in &weights {
                if Some(k) == skip {
                    next.extend(std::iter::repeat_n(w, a));
                } else {
                    next.extend(row.iter().map(|p| w * p));
                }
            }
            weights = next;
        }
        weights
    }

    /// All tables concatenated, agent-major.
    pub fn flatten(&self) -> Vec<f64> {
        self.tables.iter().flatten().copied().collect()
    }

    /// Euclidean distance between two joint policies, flattened over all agents.
    pub fn distance(&self, other: &JointPolicy) -> f64 {
        self.tables
            .iter()
            .flatten()
            .zip(other.tables.iter().flatten())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Smallest probability entry over all agents, states and actions.
    pub fn min_entry(&self) -> f64 {
        self.tables
            .iter()
            .flatten()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// Element-wise convex combination `(1 - t) * self + t * other`.
    pub fn mix(&self, other: &JointPolicy, t: f64) -> Result<JointPolicy> {
        if self.actions != other.actions || self.n_states != other.n_states {
            return Err(Error::ShapeMismatch("mixing policies of different shape".into()));
        }
        let tables = self
            .tables
            .iter()
            .zip(&other.tables)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (1.0 - t) * x + t * y).collect())
            .collect();
        Ok(JointPolicy {
            actions: self.actions.clone(),
            n_states: self.n_states,
            tables,
        })
    }

    pub(crate) fn from_tables_unchecked(
        n_states: usize,
        actions: &[usize],
        tables: Vec<Vec<f64>>,
    ) -> Self {
        Self {
            actions: actions.to_vec(),
            n_states,
            tables,
        }
    }
}

pub(crate) fn deterministic_table(n_states: usize, n_actions: usize, choice: &[usize]) -> Result<Vec<f64>> {
    let mut table = vec![0.0; n_states * n_actions];
    for (s, &a) in choice.iter().enumerate() {
        if a >= n_actions {
            return Err(Error::ShapeMismatch(format!(
                "action {a} out of range at state {s}"
            )));
        }
        table[s * n_actions + a] = 1.0;
    }
    Ok(table)
}

impl JointActions {
    /// Joint-action indexer for a policy's action sets.
    pub fn for_policy(policy: &JointPolicy) -> Self {
        JointActions::new(policy.actions())
    }
}

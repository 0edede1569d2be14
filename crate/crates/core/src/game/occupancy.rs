use serde::{Deserialize, Serialize};

use super::{JointPolicy, TabularGame};
use crate::error::{Error, Result};

/// Per-agent state-action occupancy measures, unnormalized (total mass `1 / (1 - gamma)`).
///
/// `per_agent[i][s * A_i + a_i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyMeasure {
    pub actions: Vec<usize>,
    pub n_states: usize,
    pub per_agent: Vec<Vec<f64>>,
}

impl OccupancyMeasure {
    /// `alpha_i(s) = sum_a mu_i(s, a)`.
    pub fn state_mass(&self, agent: usize) -> Vec<f64> {
        self.per_agent[agent]
            .chunks_exact(self.actions[agent])
            .map(|row| row.iter().sum())
            .collect()
    }

    pub fn total_mass(&self, agent: usize) -> f64 {
        self.per_agent[agent].iter().sum()
    }

    /// All agents' tables concatenated.
    pub fn flatten(&self) -> Vec<f64> {
        self.per_agent.iter().flatten().copied().collect()
    }

    pub fn distance(&self, other: &OccupancyMeasure) -> f64 {
        self.per_agent
            .iter()
            .flatten()
            .zip(other.per_agent.iter().flatten())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Largest violation of the flow equations
    /// `sum_a mu_i(s,a) = rho(s) + gamma sum_s' P(s|s') sum_a mu_i(s',a)`
    /// using the state kernel of joint action 0 (exact for agent-independent games).
    pub fn flow_residual(&self, game: &TabularGame) -> f64 {
        let s_count = game.n_states();
        let gamma = game.gamma();
        let mut worst = 0.0_f64;
        for agent in 0..self.per_agent.len() {
            let alpha = self.state_mass(agent);
            for s in 0..s_count {
                let inflow: f64 = (0..s_count)
                    .map(|sp| game.transition(sp, 0)[s] * alpha[sp])
                    .sum();
                worst = worst.max((alpha[s] - game.rho()[s] - gamma * inflow).abs());
            }
        }
        worst
    }

    pub fn min_entry(&self) -> f64 {
        self.per_agent
            .iter()
            .flatten()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

/// `mu_i(s, a_i) = d(s) pi_i(a_i | s) / (1 - gamma)` with `d` the visitation from the game's `rho`.
pub fn occupancy_from_policy(game: &TabularGame, policy: &JointPolicy) -> Result<OccupancyMeasure> {
    let d = super::visitation(game, policy, game.rho())?;
    let scale = 1.0 / (1.0 - game.gamma());
    let per_agent = (0..game.n_agents())
        .map(|i| {
            let a = game.actions()[i];
            policy
                .table(i)
                .iter()
                .enumerate()
                .map(|(k, p)| d[k / a] * p * scale)
                .collect()
        })
        .collect();
    Ok(OccupancyMeasure {
        actions: game.actions().to_vec(),
        n_states: game.n_states(),
        per_agent,
    })
}

/// `max_{s, a, a', s'} |P(s'|s,a) - P(s'|s,a')|`.
pub fn agent_dependence(game: &TabularGame) -> f64 {
    let mut worst = 0.0_f64;
    for s in 0..game.n_states() {
        let reference = game.transition(s, 0);
        for j in 1..game.n_joint() {
            for (a, b) in reference.iter().zip(game.transition(s, j)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    worst
}

/// True iff the kernel does not depend on the joint action (within `tol`).
pub fn check_agent_independent(game: &TabularGame, tol: f64) -> bool {
    agent_dependence(game) <= tol
}

pub(crate) fn require_agent_independent(game: &TabularGame, tol: f64) -> Result<()> {
    let deviation = agent_dependence(game);
    if deviation <= tol {
        Ok(())
    } else {
        Err(Error::NotAgentIndependent { deviation })
    }
}

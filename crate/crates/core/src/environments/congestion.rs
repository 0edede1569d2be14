//! Five-state stochastic congestion game with linear reward and kernel shifts.
//!
//! `s0 -> {s1, s2} -> {s3, s4} -> s0`. At a branching state, action `k` votes for
//! the `k`-th successor and the next state is drawn in proportion to the votes.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::clip_and_renormalize;
use crate::error::{Error, Result};
use crate::game::{JointPolicy, Response, ResponseMap, TabularGame};

/// Reward by the number of agents sharing an action at a state (1, 2, 3, 4).
pub const CONGESTION_SCHEDULE: [f64; 4] = [50.0, 15.0, 5.0, 1.0];
const N_AGENTS: usize = 4;
const N_ACTIONS: usize = 2;
const N_STATES: usize = 5;
const SUCCESSORS: [&[usize]; N_STATES] = [&[1, 2], &[3, 4], &[3, 4], &[0], &[0]];

fn default_omega() -> f64 {
    0.03
}
fn default_gamma() -> f64 {
    0.99
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CongestionParams {
    #[serde(default = "default_omega")]
    pub omega_r: f64,
    #[serde(default = "default_omega")]
    pub omega_p: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

impl Default for CongestionParams {
    fn default() -> Self {
        Self {
            omega_r: default_omega(),
            omega_p: default_omega(),
            gamma: default_gamma(),
        }
    }
}

impl CongestionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega_r >= 0.0 && self.omega_r.is_finite() && self.omega_p >= 0.0 && self.omega_p.is_finite()) {
            return Err(Error::Config(format!(
                "congestion sensitivities must be nonnegative, got ({}, {})",
                self.omega_r, self.omega_p
            )));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        Ok(())
    }

    /// `1 / ((1 - gamma) sqrt(S A_i))`, the factor multiplying both sensitivities.
    pub fn shift_scale(&self) -> f64 {
        1.0 / ((1.0 - self.gamma) * ((N_STATES * N_ACTIONS) as f64).sqrt())
    }
}

/// The unshifted game.
pub fn congestion_base(gamma: f64) -> Result<TabularGame> {
    let actions = [N_ACTIONS; N_AGENTS];
    let joint = crate::game::JointActions::new(&actions);
    let j_count = joint.len();
    let mut rewards = vec![vec![0.0; N_STATES * j_count]; N_AGENTS];
    let mut kernel = vec![0.0; N_STATES * j_count * N_STATES];
    for j in 0..j_count {
        let a = joint.decode(j);
        let zeros = a.iter().filter(|&&x| x == 0).count();
        for s in 0..N_STATES {
            for (i, table) in rewards.iter_mut().enumerate() {
                let shared = a.iter().filter(|&&x| x == a[i]).count();
                table[s * j_count + j] = CONGESTION_SCHEDULE[shared - 1];
            }
            let row = &mut kernel[(s * j_count + j) * N_STATES..(s * j_count + j + 1) * N_STATES];
            match SUCCESSORS[s] {
                [only] => row[*only] = 1.0,
                [first, second] => {
                    row[*first] = zeros as f64 / N_AGENTS as f64;
                    row[*second] = (N_AGENTS - zeros) as f64 / N_AGENTS as f64;
                }
                _ => unreachable!(),
            }
        }
    }
    let mut rho = vec![0.0; N_STATES];
    rho[0] = 1.0;
    TabularGame::new(&actions, N_STATES, gamma, rho, rewards, kernel)
}

/// Linear shift proportional to the deployed policy's deviation from uniform.
#[derive(Debug, Clone, Copy)]
pub struct CongestionResponse {
    pub params: CongestionParams,
}

impl Response for CongestionResponse {
    fn respond(&self, base: &TabularGame, policy: &JointPolicy) -> Result<TabularGame> {
        let (s_count, j_count, n) = (base.n_states(), base.n_joint(), base.n_agents());
        let joint = base.joint();
        let scale = self.params.shift_scale();
        let (wr, wp) = (self.params.omega_r * scale, self.params.omega_p * scale);
        if wr == 0.0 && wp == 0.0 {
            return Ok(base.clone());
        }
        let diff = |i: usize, s: usize, a: usize| policy.prob(i, s, a) - 1.0 / policy.actions()[i] as f64;

        let mut rewards = base.rewards().to_vec();
        let mut kernel = base.kernel().to_vec();
        for s in 0..s_count {
            for j in 0..j_count {
                let mut mean = 0.0;
                for (i, table) in rewards.iter_mut().enumerate() {
                    let d = diff(i, s, joint.action_of(j, i));
                    table[s * j_count + j] += wr * d;
                    mean += d;
                }
                mean /= n as f64;
                let c = wp * mean / s_count as f64;
                if c == 0.0 {
                    continue;
                }
                let row = &mut kernel[(s * j_count + j) * s_count..(s * j_count + j + 1) * s_count];
                for &sp in SUCCESSORS[s] {
                    row[sp] += c;
                }
                clip_and_renormalize(row).ok_or_else(|| {
                    Error::InvalidResponse(format!("kernel row ({s}, {j}) lost all mass after the shift"))
                })?;
            }
        }
        base.with_tables(rewards, kernel)
    }
}

pub fn make_congestion(params: CongestionParams) -> Result<ResponseMap> {
    params.validate()?;
    let base = congestion_base(params.gamma)?;
    Ok(ResponseMap::new(
        base,
        Arc::new(CongestionResponse { params }),
        "congestion",
        serde_json::to_value(params)?,
    ))
}

//! Small random games used as oracle fixtures.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::clip_and_renormalize;
use crate::error::{Error, Result};
use crate::game::{JointActions, JointPolicy, Response, ResponseMap, TabularGame};

/// Linear performative shift strengths.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearShift {
    pub omega_r: f64,
    pub omega_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestGameSpec {
    pub n_states: usize,
    pub actions: Vec<usize>,
    pub gamma: f64,
    #[serde(default)]
    pub common_payoff: bool,
    #[serde(default)]
    pub agent_independent: bool,
    #[serde(default)]
    pub shift: Option<LinearShift>,
    #[serde(default)]
    pub seed: u64,
}

impl TestGameSpec {
    pub fn random(n_states: usize, actions: &[usize], gamma: f64, seed: u64) -> Self {
        Self {
            n_states,
            actions: actions.to_vec(),
            gamma,
            common_payoff: false,
            agent_independent: false,
            shift: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(1..=3).contains(&self.n_states) {
            return fail(format!("test games have 1 to 3 states, got {}", self.n_states));
        }
        if !(1..=2).contains(&self.actions.len()) || self.actions.iter().any(|a| !(1..=3).contains(a)) {
            return fail(format!("test games have 1 or 2 agents with 1 to 3 actions, got {:?}", self.actions));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return fail(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        if let Some(s) = self.shift {
            if !(s.omega_r >= 0.0 && s.omega_p >= 0.0 && s.omega_r.is_finite() && s.omega_p.is_finite()) {
                return fail(format!("shift strengths must be nonnegative, got {s:?}"));
            }
        }
        Ok(())
    }
}

fn random_distribution(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..len).map(|_| rng.random::<f64>() + 0.05).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

fn random_base(spec: &TestGameSpec) -> Result<TabularGame> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let joint = JointActions::new(&spec.actions);
    let (s_count, j_count, n) = (spec.n_states, joint.len(), spec.actions.len());
    let mut rewards: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..s_count * j_count).map(|_| rng.random::<f64>()).collect())
        .collect();
    if spec.common_payoff {
        let shared = rewards[0].clone();
        rewards.iter_mut().for_each(|r| r.clone_from(&shared));
    }
    let mut kernel = Vec::with_capacity(s_count * j_count * s_count);
    for _ in 0..s_count {
        let state_row = random_distribution(&mut rng, s_count);
        for _ in 0..j_count {
            if spec.agent_independent {
                kernel.extend_from_slice(&state_row);
            } else {
                kernel.extend(random_distribution(&mut rng, s_count));
            }
        }
    }
    let rho = random_distribution(&mut rng, s_count);
    TabularGame::new(&spec.actions, s_count, spec.gamma, rho, rewards, kernel)
}

/// Reward shift `omega_r (pi_i(a_i|s) - 1/A_i)` on agent `i`'s rewards and a kernel shift
/// moving `omega_p (pi_0(0|s) - 1/A_0)` of mass from `s` to `s + 1 (mod S)`. The kernel
/// shift ignores the joint action, so agent independence is preserved.
#[derive(Debug, Clone, Copy)]
pub struct LinearShiftResponse {
    pub shift: LinearShift,
}

impl Response for LinearShiftResponse {
    fn respond(&self, base: &TabularGame, policy: &JointPolicy) -> Result<TabularGame> {
        let (s_count, j_count) = (base.n_states(), base.n_joint());
        let joint = base.joint();
        let mut rewards = base.rewards().to_vec();
        let mut kernel = base.kernel().to_vec();
        for s in 0..s_count {
            for j in 0..j_count {
                for (i, table) in rewards.iter_mut().enumerate() {
                    let a = joint.action_of(j, i);
                    let d = policy.prob(i, s, a) - 1.0 / base.actions()[i] as f64;
                    table[s * j_count + j] += self.shift.omega_r * d;
                }
            }
            let c = self.shift.omega_p * (policy.prob(0, s, 0) - 1.0 / base.actions()[0] as f64);
            if c == 0.0 || s_count == 1 {
                continue;
            }
            for j in 0..j_count {
                let row = &mut kernel[(s * j_count + j) * s_count..(s * j_count + j + 1) * s_count];
                row[s] -= c;
                row[(s + 1) % s_count] += c;
                clip_and_renormalize(row)
                    .ok_or_else(|| Error::InvalidResponse(format!("kernel row ({s}, {j}) lost all mass")))?;
            }
        }
        base.with_tables(rewards, kernel)
    }
}

/// A random fixture as described by `spec`.
pub fn make_test_game(spec: &TestGameSpec) -> Result<ResponseMap> {
    spec.validate()?;
    let base = random_base(spec)?;
    let params = serde_json::to_value(spec)?;
    Ok(match spec.shift {
        Some(shift) if shift.omega_r > 0.0 || shift.omega_p > 0.0 => {
            ResponseMap::new(base, Arc::new(LinearShiftResponse { shift }), "test_game", params)
        }
        _ => ResponseMap::new(base, Arc::new(crate::game::ConstantResponse), "test_game", params),
    })
}

/// One state, two agents with two actions, both paid 1 iff the actions match.
pub fn coordination_bandit(omega_r: f64) -> Result<ResponseMap> {
    let r = vec![1.0, 0.0, 0.0, 1.0];
    let base = TabularGame::new(&[2, 2], 1, 0.0, vec![1.0], vec![r.clone(), r], vec![1.0; 4])?;
    let params = serde_json::json!({ "omega_r": omega_r });
    Ok(if omega_r > 0.0 {
        let shift = LinearShift { omega_r, omega_p: 0.0 };
        ResponseMap::new(base, Arc::new(LinearShiftResponse { shift }), "coordination", params)
    } else {
        ResponseMap::new(base, Arc::new(crate::game::ConstantResponse), "coordination", params)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::check_agent_independent;

    #[test]
    fn flags_are_honored() {
        let spec = TestGameSpec {
            common_payoff: true,
            agent_independent: true,
            ..TestGameSpec::random(2, &[2, 3], 0.9, 4)
        };
        let map = make_test_game(&spec).unwrap();
        assert!(check_agent_independent(map.base(), 1e-12));
        assert_eq!(map.base().reward_table(0), map.base().reward_table(1));
    }

    #[test]
    fn shifted_games_stay_valid_and_independent() {
        let spec = TestGameSpec {
            agent_independent: true,
            shift: Some(LinearShift {
                omega_r: 0.5,
                omega_p: 0.5,
            }),
            ..TestGameSpec::random(3, &[2, 2], 0.8, 9)
        };
        let map = make_test_game(&spec).unwrap();
        let p = JointPolicy::deterministic(3, &[2, 2], &[vec![0, 1, 0], vec![1, 1, 0]]).unwrap();
        let g = map.deploy(&p).unwrap();
        assert!(check_agent_independent(&g, 1e-12));
        assert_ne!(&g, map.base());
    }

    #[test]
    fn rejects_oversized_specs() {
        assert!(make_test_game(&TestGameSpec::random(4, &[2], 0.5, 0)).is_err());
        assert!(make_test_game(&TestGameSpec::random(1, &[2, 2, 2], 0.5, 0)).is_err());
        assert!(make_test_game(&TestGameSpec::random(1, &[4], 0.5, 0)).is_err());
    }

    #[test]
    fn coordination_is_constant_without_shift() {
        let map = coordination_bandit(0.0).unwrap();
        let p = JointPolicy::from_tables(1, &[2, 2], vec![vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        assert_eq!(&map.deploy(&p).unwrap(), map.base());
    }
}

//! Two-state safe-distancing game where an influencer overrides declared activities.
//!
//! Each agent's declared activity is kept with probability `1 - alpha` and otherwise
//! replaced by a draw from the influencer's softmax recommendation for that agent.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{marginalized_mdp, JointActions, JointPolicy, Response, ResponseMap, TabularGame};

pub const SAFE: usize = 0;
pub const DISTANCING: usize = 1;
const N_ACTIVITIES: usize = 4;
const CACHE_LIMIT: usize = 256;

fn default_agents() -> usize {
    8
}
fn default_weights() -> [f64; N_ACTIVITIES] {
    [4.0, 3.0, 2.0, 1.0]
}
fn default_penalty() -> f64 {
    100.0
}
fn default_alpha() -> f64 {
    0.15
}
fn default_temperature() -> f64 {
    1.0
}
fn default_gamma() -> f64 {
    0.99
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SafeDistancingParams {
    #[serde(default = "default_agents")]
    pub n_agents: usize,
    #[serde(default = "default_weights")]
    pub weights: [f64; N_ACTIVITIES],
    #[serde(default = "default_penalty")]
    pub penalty: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

impl Default for SafeDistancingParams {
    fn default() -> Self {
        Self {
            n_agents: default_agents(),
            weights: default_weights(),
            penalty: default_penalty(),
            alpha: default_alpha(),
            temperature: default_temperature(),
            gamma: default_gamma(),
        }
    }
}

impl SafeDistancingParams {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(1..=10).contains(&self.n_agents) {
            return fail(format!("n_agents must lie in 1..=10, got {}", self.n_agents));
        }
        if self.weights.windows(2).any(|w| !(w[0] > w[1])) || self.weights.iter().any(|w| !w.is_finite()) {
            return fail(format!("weights must be strictly decreasing, got {:?}", self.weights));
        }
        if !(self.penalty >= 0.0 && self.penalty.is_finite()) {
            return fail(format!("penalty must be nonnegative, got {}", self.penalty));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return fail(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        Ok(())
    }

    /// Crowding threshold: some activity count strictly above `N / 2`.
    pub fn crowded(&self, counts: &[usize]) -> bool {
        counts.iter().any(|&c| 2 * c > self.n_agents)
    }

    /// Release threshold: every activity count at most `N / 4`.
    pub fn dispersed(&self, counts: &[usize]) -> bool {
        counts.iter().all(|&c| 4 * c <= self.n_agents)
    }
}

/// The game before any influencer override.
pub fn safe_distancing_base(p: &SafeDistancingParams) -> Result<TabularGame> {
    p.validate()?;
    let n = p.n_agents;
    let actions = vec![N_ACTIVITIES; n];
    let joint = JointActions::new(&actions);
    let j_count = joint.len();
    let mut rewards = vec![vec![0.0; 2 * j_count]; n];
    let mut kernel = vec![0.0; 2 * j_count * 2];
    let mut counts = [0usize; N_ACTIVITIES];
    for j in 0..j_count {
        counts.fill(0);
        let a = joint.decode(j);
        for &k in &a {
            counts[k] += 1;
        }
        for (i, table) in rewards.iter_mut().enumerate() {
            let base = p.weights[a[i]] * counts[a[i]] as f64;
            table[SAFE * j_count + j] = base;
            table[DISTANCING * j_count + j] = base - p.penalty;
        }
        let from_safe = if p.crowded(&counts) { DISTANCING } else { SAFE };
        let from_distancing = if p.dispersed(&counts) { SAFE } else { DISTANCING };
        kernel[(SAFE * j_count + j) * 2 + from_safe] = 1.0;
        kernel[(DISTANCING * j_count + j) * 2 + from_distancing] = 1.0;
    }
    TabularGame::new(&actions, 2, p.gamma, vec![0.5, 0.5], rewards, kernel)
}

fn softmax(x: &[f64], temperature: f64) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = x.iter().map(|v| ((v - m) / temperature).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

/// Influencer override response with a bounded memo of deployed games.
#[derive(Debug)]
pub struct SafeDistancingResponse {
    pub params: SafeDistancingParams,
    cache: Mutex<HashMap<Vec<u64>, Arc<TabularGame>>>,
}

impl SafeDistancingResponse {
    pub fn new(params: SafeDistancingParams) -> Self {
        Self {
            params,
            cache: Mutex::new(HashMap::new()),
        }
    }

    /// Influencer recommendation `sigma_i(. | s)`: softmax of the optimal Q of agent
    /// `i`'s single-agent problem in the base game with the others fixed at `policy`.
    pub fn influencer(&self, base: &TabularGame, policy: &JointPolicy, agent: usize) -> Result<Vec<f64>> {
        let sol = marginalized_mdp(base, policy, agent)?.solve_optimal()?;
        Ok(sol
            .q
            .chunks_exact(base.actions()[agent])
            .flat_map(|row| softmax(row, self.params.temperature))
            .collect())
    }

    fn compute(&self, base: &TabularGame, policy: &JointPolicy) -> Result<TabularGame> {
        let alpha = self.params.alpha;
        let (n, s_count, j_count) = (base.n_agents(), base.n_states(), base.n_joint());
        let joint = base.joint();
        let sigma: Vec<Vec<f64>> = (0..n)
            .map(|i| self.influencer(base, policy, i))
            .collect::<Result<_>>()?;

        // per state, a stack of n reward tables and S kernel columns, interleaved per joint action
        let width = n + s_count;
        let mut rewards = base.rewards().to_vec();
        let mut kernel = base.kernel().to_vec();
        let mut stack = vec![0.0; j_count * width];
        for s in 0..s_count {
            for j in 0..j_count {
                let cell = &mut stack[j * width..(j + 1) * width];
                for i in 0..n {
                    cell[i] = base.reward(i, s, j);
                }
                cell[n..].copy_from_slice(base.transition(s, j));
            }
            for (i, sig) in sigma.iter().enumerate() {
                let a = base.actions()[i];
                let row = &sig[s * a..(s + 1) * a];
                let stride = joint.stride(i);
                let block = stride * a;
                let mut mixed = vec![0.0; width];
                for outer in (0..j_count).step_by(block) {
                    for inner in 0..stride {
                        let first = outer + inner;
                        mixed.fill(0.0);
                        for (b, &w) in row.iter().enumerate() {
                            let cell = &stack[(first + b * stride) * width..(first + b * stride + 1) * width];
                            for (m, x) in mixed.iter_mut().zip(cell) {
                                *m += w * x;
                            }
                        }
                        for b in 0..a {
                            let cell = &mut stack[(first + b * stride) * width..(first + b * stride + 1) * width];
                            for (x, m) in cell.iter_mut().zip(&mixed) {
                                *x = (1.0 - alpha) * *x + alpha * m;
                            }
                        }
                    }
                }
            }
            for j in 0..j_count {
                let cell = &stack[j * width..(j + 1) * width];
                for (i, table) in rewards.iter_mut().enumerate() {
                    table[s * j_count + j] = cell[i];
                }
                let row = &mut kernel[(s * j_count + j) * s_count..(s * j_count + j + 1) * s_count];
                let total: f64 = cell[n..].iter().sum();
                for (p, x) in row.iter_mut().zip(&cell[n..]) {
                    *p = x.max(0.0) / total;
                }
            }
        }
        base.with_tables(rewards, kernel)
    }
}

impl Response for SafeDistancingResponse {
    fn respond(&self, base: &TabularGame, policy: &JointPolicy) -> Result<TabularGame> {
        if self.params.alpha == 0.0 {
            return Ok(base.clone());
        }
        let key: Vec<u64> = policy.flatten().iter().map(|x| x.to_bits()).collect();
        if let Some(hit) = self.cache.lock().expect("cache poisoned").get(&key) {
            return Ok(hit.as_ref().clone());
        }
        let game = self.compute(base, policy)?;
        let mut cache = self.cache.lock().expect("cache poisoned");
        if cache.len() >= CACHE_LIMIT {
            cache.clear();
        }
        cache.insert(key, Arc::new(game.clone()));
        Ok(game)
    }
}

pub fn make_safe_distancing(params: SafeDistancingParams) -> Result<ResponseMap> {
    let base = safe_distancing_base(&params)?;
    Ok(ResponseMap::new(
        base,
        Arc::new(SafeDistancingResponse::new(params)),
        "safe_distancing",
        serde_json::to_value(params)?,
    ))
}

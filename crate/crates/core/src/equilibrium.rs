//! Best responses, stability and Nash gaps, performative regret and the
//! policy-distance metric.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{
    marginalized_mdp, policy_evaluation, EvalResult, JointPolicy, ResponseMap, TabularGame,
    DEFAULT_SOLVE_TOL,
};

/// Default cap on enumerated deviation / grid candidates.
pub const MAX_ENUMERATION: u128 = 1_000_000;

/// A deterministic best response of one agent with the others frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct BestResponse {
    /// Chosen action per state.
    pub actions: Vec<usize>,
    /// Value at the game's initial distribution.
    pub value: f64,
}

impl BestResponse {
    pub fn table(&self, n_actions: usize) -> Vec<f64> {
        let mut t = vec![0.0; self.actions.len() * n_actions];
        for (s, &a) in self.actions.iter().enumerate() {
            t[s * n_actions + a] = 1.0;
        }
        t
    }
}

/// Exact best response of `agent` in the fixed `game`, by policy iteration on the
/// single-agent MDP that marginalizes the other agents.
pub fn best_response(game: &TabularGame, policy: &JointPolicy, agent: usize) -> Result<BestResponse> {
    let mdp = marginalized_mdp(game, policy, agent)?;
    let sol = mdp.solve_optimal()?;
    let value = sol.values.iter().zip(game.rho()).map(|(v, p)| v * p).sum();
    Ok(BestResponse {
        actions: sol.policy,
        value,
    })
}

/// Per-agent best-response gaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub agent_gaps: Vec<f64>,
    pub max_gap: f64,
    pub argmax_agent: usize,
    /// Simplex-grid step used for re-deploying deviations (Nash gap only).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub grid_resolution: Option<f64>,
    #[serde(skip)]
    pub best_response_values: Vec<f64>,
    #[serde(skip)]
    pub best_response_policies: Vec<Vec<usize>>,
}

impl GapReport {
    fn from_parts(
        gaps: Vec<f64>,
        values: Vec<f64>,
        policies: Vec<Vec<usize>>,
        grid_resolution: Option<f64>,
    ) -> Self {
        let (argmax_agent, max_gap) = gaps
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, v)| if v > bv { (i, v) } else { (bi, bv) });
        Self {
            agent_gaps: gaps,
            max_gap,
            argmax_agent,
            grid_resolution,
            best_response_values: values,
            best_response_policies: policies,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Stability gaps of `policy` inside an already deployed game with its evaluation.
pub fn gap_in_game(game: &TabularGame, eval: &EvalResult, policy: &JointPolicy) -> Result<GapReport> {
    let responses: Vec<BestResponse> = (0..game.n_agents())
        .into_par_iter()
        .map(|i| best_response(game, policy, i))
        .collect::<Result<_>>()?;
    let gaps = responses
        .iter()
        .enumerate()
        .map(|(i, br)| br.value - eval.value_at(i, game.rho()))
        .collect();
    let values = responses.iter().map(|br| br.value).collect();
    let policies = responses.into_iter().map(|br| br.actions).collect();
    Ok(GapReport::from_parts(gaps, values, policies, None))
}

/// Performative-stability gap: best responses in the game `G(pi)` held fixed.
pub fn pse_gap(map: &ResponseMap, policy: &JointPolicy) -> Result<GapReport> {
    let game = map.deploy(policy)?;
    let eval = policy_evaluation(&game, policy, DEFAULT_SOLVE_TOL)?;
    gap_in_game(&game, &eval, policy)
}

/// Value of `agent` under `policy` in `game`, at the game's initial distribution.
pub fn agent_value(game: &TabularGame, policy: &JointPolicy, agent: usize) -> Result<f64> {
    let mdp = marginalized_mdp(game, policy, agent)?;
    let v = mdp.evaluate(policy.table(agent))?;
    Ok(v.iter().zip(game.rho()).map(|(v, p)| v * p).sum())
}

/// Points of the simplex over `n_actions` with coordinates in multiples of `1 / steps`,
/// in lexicographic order of their integer compositions.
pub fn simplex_grid(n_actions: usize, steps: usize) -> Vec<Vec<f64>> {
    fn rec(remaining: usize, slots: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if slots == 1 {
            prefix.push(remaining);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for k in (0..=remaining).rev() {
            prefix.push(k);
            rec(remaining - k, slots - 1, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(steps, n_actions, &mut Vec::new(), &mut out);
    out.into_iter()
        .map(|c| c.into_iter().map(|k| k as f64 / steps as f64).collect())
        .collect()
}

/// Number of grid steps for a resolution that must divide 1.
pub fn grid_steps(resolution: f64) -> Result<usize> {
    if !(resolution > 0.0 && resolution <= 1.0) {
        return Err(Error::Config(format!("grid resolution {resolution} not in (0, 1]")));
    }
    let steps = (1.0 / resolution).round();
    if (steps * resolution - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("grid resolution {resolution} does not divide 1")));
    }
    Ok(steps as usize)
}

/// Per-state candidate rows for one agent: the simplex grid, or only vertices
/// when `resolution` is `None`.
pub(crate) fn candidate_rows(n_actions: usize, resolution: Option<f64>) -> Result<Vec<Vec<f64>>> {
    match resolution {
        Some(r) => Ok(simplex_grid(n_actions, grid_steps(r)?)),
        None => Ok(simplex_grid(n_actions, 1)),
    }
}

/// Decode mixed-radix `index` over `n_states` digits of base `rows.len()` into a policy table.
pub(crate) fn table_from_index(rows: &[Vec<f64>], n_states: usize, mut index: u128) -> Vec<f64> {
    let base = rows.len() as u128;
    let mut digits = vec![0usize; n_states];
    for s in (0..n_states).rev() {
        digits[s] = (index % base) as usize;
        index /= base;
    }
    digits.iter().flat_map(|&d| rows[d].iter().copied()).collect()
}

/// Nash gap where each deviation re-deploys the game.
///
/// The inner maximization runs over every deviation policy on the simplex grid of the
/// given resolution (vertices only for `None`). This is a lower bound on the exact gap.
pub fn ne_gap(map: &ResponseMap, policy: &JointPolicy, resolution: Option<f64>) -> Result<GapReport> {
    let game = map.deploy(policy)?;
    let n_states = game.n_states();
    let mut gaps = Vec::with_capacity(game.n_agents());
    let mut values = Vec::with_capacity(game.n_agents());
    for i in 0..game.n_agents() {
        let current = agent_value(&game, policy, i)?;
        let rows = candidate_rows(game.actions()[i], resolution)?;
        let count = (rows.len() as u128).checked_pow(n_states as u32).unwrap_or(u128::MAX);
        if count > MAX_ENUMERATION {
            return Err(Error::TooLarge {
                count,
                limit: MAX_ENUMERATION,
            });
        }
        let best = (0..count)
            .into_par_iter()
            .map(|idx| -> Result<f64> {
                let table = table_from_index(&rows, n_states, idx);
                let deviated = policy.with_agent(i, table)?;
                let deployed = map.deploy(&deviated)?;
                agent_value(&deployed, &deviated, i)
            })
            .try_reduce(|| f64::NEG_INFINITY, |a, b| Ok(a.max(b)))?;
        gaps.push(best - current);
        values.push(best);
    }
    Ok(GapReport::from_parts(
        gaps,
        values,
        Vec::new(),
        Some(resolution.unwrap_or(1.0)),
    ))
}

/// One round of a learning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub t: usize,
    pub policy: JointPolicy,
    /// `V_i(rho)` in the game deployed this round.
    pub values: Vec<f64>,
    pub pse_gap: f64,
    pub policy_distance: f64,
    pub wall_ms: f64,
    /// Smallest INPG normalizer over agents and states, when the algorithm has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_normalizer: Option<f64>,
    /// `||mu^{t+1} - mu^t||` for occupancy-measure runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_residual: Option<f64>,
}

/// Per-round trace of a learning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub rounds: Vec<RoundRecord>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub window: usize,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl RunHistory {
    pub fn new(config: serde_json::Value, seed: u64, window: usize) -> Self {
        Self {
            rounds: Vec::new(),
            config,
            seed,
            window,
            warnings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }

    pub fn push(&mut self, record: RoundRecord) -> Result<()> {
        let expected = self.rounds.last().map_or(1, |r| r.t + 1);
        if record.t != expected {
            return Err(Error::Config(format!(
                "round {} recorded after round {}",
                record.t,
                expected - 1
            )));
        }
        self.rounds.push(record);
        Ok(())
    }

    pub fn policies(&self) -> Vec<&JointPolicy> {
        self.rounds.iter().map(|r| &r.policy).collect()
    }

    /// Fill `policy_distance` for every round from the final `window` policies.
    pub fn finalize_distances(&mut self) {
        let distances = policy_distance(&self.policies(), self.window);
        for (r, d) in self.rounds.iter_mut().zip(distances) {
            r.policy_distance = d;
        }
    }

    /// Running average of the stored stability gaps, `PReg(t)` for every `t`.
    pub fn regret_curve(&self) -> Vec<f64> {
        let mut sum = 0.0;
        self.rounds
            .iter()
            .enumerate()
            .map(|(k, r)| {
                sum += r.pse_gap;
                sum / (k + 1) as f64
            })
            .collect()
    }

    /// Smallest stored stability gap and the round it occurred in.
    pub fn best_iterate(&self) -> Option<(usize, f64)> {
        self.rounds
            .iter()
            .map(|r| (r.t, r.pse_gap))
            .fold(None, |best, (t, g)| match best {
                Some((_, bg)) if bg <= g => best,
                _ => Some((t, g)),
            })
    }

    /// Copy with timing zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        let mut h = self.clone();
        for r in &mut h.rounds {
            r.wall_ms = 0.0;
        }
        h
    }
}

/// `PReg(T) = (1/T) sum_t max_i gap_i(pi^t)`, recomputed by redeploying every stored policy.
pub fn performative_regret(map: &ResponseMap, history: &RunHistory) -> Result<f64> {
    if history.is_empty() {
        return Err(Error::EmptyHistory);
    }
    let total = history
        .rounds
        .iter()
        .map(|r| pse_gap(map, &r.policy).map(|g| g.max_gap))
        .sum::<Result<f64>>()?;
    Ok(total / history.len() as f64)
}

/// Per-round `(1/n) sum_i ||pi_i^t - pi_i^last||_2`, where `pi^last` averages the
/// final `window` policies.
pub fn policy_distance(policies: &[&JointPolicy], window: usize) -> Vec<f64> {
    let Some(last) = policies.last() else {
        return Vec::new();
    };
    let window = window.clamp(1, policies.len());
    let tail = &policies[policies.len() - window..];
    let n = last.n_agents();
    let mean: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut acc = vec![0.0; last.table(i).len()];
            for (k, p) in tail.iter().enumerate() {
                for (a, x) in acc.iter_mut().zip(p.table(i)) {
                    *a += (x - *a) / (k + 1) as f64;
                }
            }
            acc
        })
        .collect();
    policies
        .iter()
        .map(|p| {
            (0..n)
                .map(|i| {
                    p.table(i)
                        .iter()
                        .zip(&mean[i])
                        .map(|(x, m)| (x - m) * (x - m))
                        .sum::<f64>()
                        .sqrt()
                })
                .sum::<f64>()
                / n as f64
        })
        .collect()
}

/// `|(Phi^pi - Phi^{pi_i', pi_-i}) - (V_i^pi - V_i^{pi_i', pi_-i})|` at `rho`.
///
/// `potential(game, policy, dist)` evaluates the candidate potential function.
pub fn verify_mpg_identity<F>(
    game: &TabularGame,
    potential: F,
    policy: &JointPolicy,
    agent: usize,
    deviation: &[f64],
) -> Result<f64>
where
    F: Fn(&TabularGame, &JointPolicy, &[f64]) -> Result<f64>,
{
    let deviated = policy.with_agent(agent, deviation.to_vec())?;
    let rho = game.rho();
    let d_phi = potential(game, policy, rho)? - potential(game, &deviated, rho)?;
    let d_v = agent_value(game, policy, agent)? - agent_value(game, &deviated, agent)?;
    Ok((d_phi - d_v).abs())
}

/// Potential of an identical-interest game: the shared value (agent 0's).
pub fn common_value_potential(game: &TabularGame, policy: &JointPolicy, dist: &[f64]) -> Result<f64> {
    let g = game.with_rho(dist.to_vec())?;
    agent_value(&g, policy, 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coordination() -> TabularGame {
        let r = vec![1.0, 0.0, 0.0, 1.0];
        TabularGame::new(&[2, 2], 1, 0.0, vec![1.0], vec![r.clone(), r], vec![1.0; 4]).unwrap()
    }

    #[test]
    fn bandit_best_response() {
        let g = TabularGame::new(&[2], 1, 0.0, vec![1.0], vec![vec![1.0, 0.0]], vec![1.0; 2]).unwrap();
        let br = best_response(&g, &JointPolicy::uniform_for(&g), 0).unwrap();
        assert_eq!(br.actions, vec![0]);
        assert_eq!(br.value, 1.0);
    }

    #[test]
    fn coordination_gaps() {
        let map = ResponseMap::constant(coordination(), "coordination");
        let matched = JointPolicy::deterministic(1, &[2, 2], &[vec![1], vec![1]]).unwrap();
        let report = pse_gap(&map, &matched).unwrap();
        assert!(report.max_gap.abs() < 1e-12);

        // against a uniform partner both actions earn 0.5, so uniform is already stable
        let uniform = JointPolicy::uniform(1, &[2, 2]);
        let report = pse_gap(&map, &uniform).unwrap();
        assert!(report.max_gap.abs() < 1e-12);
        assert_eq!(report.best_response_values, vec![0.5, 0.5]);
        assert_eq!(report.best_response_policies, vec![vec![0], vec![0]]);

        let lopsided = JointPolicy::from_tables(1, &[2, 2], vec![vec![0.5, 0.5], vec![0.8, 0.2]]).unwrap();
        let report = pse_gap(&map, &lopsided).unwrap();
        assert!((report.max_gap - 0.3).abs() < 1e-12);
        assert_eq!(report.argmax_agent, 0);
    }

    #[test]
    fn ne_gap_equals_pse_gap_for_constant_response() {
        let map = ResponseMap::constant(coordination(), "coordination");
        let p = JointPolicy::from_tables(1, &[2, 2], vec![vec![0.3, 0.7], vec![0.8, 0.2]]).unwrap();
        let pse = pse_gap(&map, &p).unwrap();
        let ne = ne_gap(&map, &p, Some(0.1)).unwrap();
        for (a, b) in pse.agent_gaps.iter().zip(&ne.agent_gaps) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(ne.grid_resolution, Some(0.1));
    }

    #[test]
    fn gap_report_json_keys() {
        let map = ResponseMap::constant(coordination(), "coordination");
        let report = pse_gap(&map, &JointPolicy::uniform(1, &[2, 2])).unwrap();
        let v: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, vec!["agent_gaps", "argmax_agent", "max_gap"]);

        let ne = ne_gap(&map, &JointPolicy::uniform(1, &[2, 2]), Some(0.5)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&ne.to_json().unwrap()).unwrap();
        assert_eq!(v["grid_resolution"], 0.5);
    }

    #[test]
    fn simplex_grid_counts_and_order() {
        let g = simplex_grid(3, 2);
        assert_eq!(g.len(), 6);
        assert_eq!(g[0], vec![1.0, 0.0, 0.0]);
        assert_eq!(g[5], vec![0.0, 0.0, 1.0]);
        assert_eq!(simplex_grid(2, 20).len(), 21);
        assert!(grid_steps(0.3).is_err());
        assert_eq!(grid_steps(0.05).unwrap(), 20);
    }

    #[test]
    fn policy_distance_cases() {
        let p = JointPolicy::from_tables(1, &[2], vec![vec![0.9, 0.1]]).unwrap();
        let q = JointPolicy::from_tables(1, &[2], vec![vec![0.3, 0.7]]).unwrap();
        let constant = vec![&p, &p, &p];
        assert_eq!(policy_distance(&constant, 10), vec![0.0; 3]);

        let run = vec![&p, &q, &p, &q];
        assert_eq!(*policy_distance(&run, 1).last().unwrap(), 0.0);

        // alternation with window 2: distance to the midpoint
        let expect = (2.0 * 0.3_f64 * 0.3).sqrt();
        for d in policy_distance(&run, 2) {
            assert!((d - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn regret_of_constant_history() {
        let map = ResponseMap::constant(coordination(), "coordination");
        let p = JointPolicy::from_tables(1, &[2, 2], vec![vec![0.3, 0.7], vec![0.8, 0.2]]).unwrap();
        let gap = pse_gap(&map, &p).unwrap().max_gap;
        let mut h = RunHistory::new(serde_json::Value::Null, 0, 10);
        for t in 1..=3 {
            h.push(RoundRecord {
                t,
                policy: p.clone(),
                values: vec![0.0; 2],
                pse_gap: gap,
                policy_distance: 0.0,
                wall_ms: 0.0,
                min_normalizer: None,
                step_residual: None,
            })
            .unwrap();
            let preg = performative_regret(&map, &h).unwrap();
            assert!((preg - gap).abs() < 1e-14);
        }
        assert!(h
            .push(RoundRecord {
                t: 7,
                ..h.rounds[0].clone()
            })
            .is_err());
        let empty = RunHistory::new(serde_json::Value::Null, 0, 10);
        assert!(matches!(performative_regret(&map, &empty), Err(Error::EmptyHistory)));
    }

    #[test]
    fn null_deviation_identity_is_zero() {
        let g = coordination();
        let p = JointPolicy::from_tables(1, &[2, 2], vec![vec![0.3, 0.7], vec![0.8, 0.2]]).unwrap();
        let err = verify_mpg_identity(&g, common_value_potential, &p, 1, p.table(1)).unwrap();
        assert_eq!(err, 0.0);
    }
}

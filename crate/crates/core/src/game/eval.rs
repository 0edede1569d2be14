use nalgebra::DMatrix;

use super::{JointPolicy, TabularGame};
use crate::error::{Error, Result};

/// Residual tolerance used when callers do not pick one.
pub const DEFAULT_SOLVE_TOL: f64 = 1e-8;

/// Exact evaluation of a joint policy in a fixed game.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    /// `values[i][s]`
    pub values: Vec<Vec<f64>>,
    /// `q[i][s * J + j]`, over joint actions.
    pub q: Vec<Vec<f64>>,
    /// `qbar[i][s * A_i + a_i]`, opponents marginalized out.
    pub qbar: Vec<Vec<f64>>,
    /// `advantage[i][s * A_i + a_i] = qbar - V`.
    pub advantage: Vec<Vec<f64>>,
    /// Discounted state visitation from the game's initial distribution.
    pub visitation: Vec<f64>,
    /// Largest absolute residual of the two linear solves.
    pub solve_residual: f64,
}

impl EvalResult {
    /// `V_i(dist) = sum_s dist(s) V_i(s)`.
    pub fn value_at(&self, agent: usize, dist: &[f64]) -> f64 {
        self.values[agent]
            .iter()
            .zip(dist)
            .map(|(v, p)| v * p)
            .sum()
    }
}

/// Policy-marginalized reward vectors and state kernel, `r_i^pi(s)` and `P^pi(s'|s)`.
fn marginalize(game: &TabularGame, policy: &JointPolicy) -> (Vec<Vec<f64>>, Vec<f64>) {
    let (n, s_count, j_count) = (game.n_agents(), game.n_states(), game.n_joint());
    let mut r_pi = vec![vec![0.0; s_count]; n];
    let mut p_pi = vec![0.0; s_count * s_count];
    for s in 0..s_count {
        let w = policy.joint_probs(s);
        for (i, r_row) in r_pi.iter_mut().enumerate() {
            let table = &game.reward_table(i)[s * j_count..(s + 1) * j_count];
            r_row[s] = table.iter().zip(&w).map(|(r, p)| r * p).sum();
        }
        let row = &mut p_pi[s * s_count..(s + 1) * s_count];
        for (j, &pj) in w.iter().enumerate() {
            if pj == 0.0 {
                continue;
            }
            for (acc, p) in row.iter_mut().zip(game.transition(s, j)) {
                *acc += pj * p;
            }
        }
    }
    (r_pi, p_pi)
}

fn bellman_matrix(p: &[f64], s_count: usize, gamma: f64) -> DMatrix<f64> {
    DMatrix::from_fn(s_count, s_count, |r, c| {
        let id = if r == c { 1.0 } else { 0.0 };
        id - gamma * p[r * s_count + c]
    })
}

fn max_abs_residual(m: &DMatrix<f64>, x: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (m * x - b).amax()
}

/// Solve `m x = b`, returning the solution and its max-norm residual.
fn solve(m: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let lu = m.clone().lu();
    let x = lu
        .solve(b)
        .ok_or_else(|| Error::SolveFailure("Bellman matrix is singular".into()))?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::SolveFailure("non-finite solution".into()));
    }
    let residual = max_abs_residual(m, &x, b);
    Ok((x, residual))
}

/// Exact values, Q-values, marginalized quantities and visitation of `policy` in `game`.
///
/// Solves `(I - gamma P^pi) V_i = r_i^pi` directly for all agents at once.
pub fn policy_evaluation(game: &TabularGame, policy: &JointPolicy, tol: f64) -> Result<EvalResult> {
    policy.check_shape(game)?;
    let (n, s_count, j_count) = (game.n_agents(), game.n_states(), game.n_joint());
    let gamma = game.gamma();
    let (r_pi, p_pi) = marginalize(game, policy);

    let m = bellman_matrix(&p_pi, s_count, gamma);
    let rhs = DMatrix::from_fn(s_count, n, |s, i| r_pi[i][s]);
    let (v, value_residual) = solve(&m, &rhs)?;

    let rho = DMatrix::from_column_slice(s_count, 1, game.rho());
    let (x, visit_residual) = solve(&m.transpose(), &rho)?;
    let visitation: Vec<f64> = x.iter().map(|v| (1.0 - gamma) * v).collect();

    let values: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..s_count).map(|s| v[(s, i)]).collect())
        .collect();

    let mut q = vec![vec![0.0; s_count * j_count]; n];
    for s in 0..s_count {
        for j in 0..j_count {
            let next = game.transition(s, j);
            for (i, q_i) in q.iter_mut().enumerate() {
                let cont: f64 = next.iter().zip(&values[i]).map(|(p, v)| p * v).sum();
                q_i[s * j_count + j] = game.reward(i, s, j) + gamma * cont;
            }
        }
    }

    let qbar: Vec<Vec<f64>> = (0..n)
        .map(|i| marginal_q(game, &q[i], policy, i))
        .collect::<Result<_>>()?;
    let advantage: Vec<Vec<f64>> = (0..n)
        .map(|i| advantage_from(&qbar[i], &values[i], game.actions()[i]))
        .collect();

    let solve_residual = value_residual.max(visit_residual);
    if !(solve_residual <= tol) {
        return Err(Error::SolveFailure(format!(
            "residual {solve_residual:e} exceeds tolerance {tol:e}"
        )));
    }
    Ok(EvalResult {
        values,
        q,
        qbar,
        advantage,
        visitation,
        solve_residual,
    })
}

/// `Qbar_i(s, a_i) = sum_{a_-i} prod_{j != i} pi_j(a_j|s) Q_i(s, a_i, a_-i)`.
pub fn marginal_q(game: &TabularGame, q_i: &[f64], policy: &JointPolicy, agent: usize) -> Result<Vec<f64>> {
    policy.check_shape(game)?;
    let (s_count, j_count) = (game.n_states(), game.n_joint());
    if q_i.len() != s_count * j_count {
        return Err(Error::ShapeMismatch(format!(
            "Q table has {} entries, expected {}",
            q_i.len(),
            s_count * j_count
        )));
    }
    let a_i = game.actions()[agent];
    let joint = game.joint();
    let mut out = vec![0.0; s_count * a_i];
    for s in 0..s_count {
        let w = policy.opponent_probs(s, agent);
        let row = &mut out[s * a_i..(s + 1) * a_i];
        for j in 0..j_count {
            row[joint.action_of(j, agent)] += w[j] * q_i[s * j_count + j];
        }
    }
    Ok(out)
}

fn advantage_from(qbar: &[f64], values: &[f64], n_actions: usize) -> Vec<f64> {
    qbar.chunks_exact(n_actions)
        .zip(values)
        .flat_map(|(row, v)| row.iter().map(move |q| q - v))
        .collect()
}

/// `Abar_i(s, a_i) = Qbar_i(s, a_i) - V_i(s)`.
pub fn marginal_advantage(eval: &EvalResult, agent: usize) -> Vec<f64> {
    let n_actions = eval.qbar[agent].len() / eval.values[agent].len();
    advantage_from(&eval.qbar[agent], &eval.values[agent], n_actions)
}

/// Discounted state visitation `d = (1 - gamma) from^T (I - gamma P^pi)^{-1}`.
pub fn visitation(game: &TabularGame, policy: &JointPolicy, from: &[f64]) -> Result<Vec<f64>> {
    policy.check_shape(game)?;
    let s_count = game.n_states();
    if from.len() != s_count {
        return Err(Error::ShapeMismatch(format!(
            "start distribution has {} entries, expected {s_count}",
            from.len()
        )));
    }
    super::check_distribution(from).map_err(|e| Error::InvalidGame(format!("start distribution: {e}")))?;
    let (_, p_pi) = marginalize(game, policy);
    let m = bellman_matrix(&p_pi, s_count, game.gamma()).transpose();
    let b = DMatrix::from_column_slice(s_count, 1, from);
    let (x, _) = solve(&m, &b)?;
    Ok(x.iter().map(|v| (1.0 - game.gamma()) * v).collect())
}

/// Single-policy distribution-mismatch estimates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MismatchDiagnostics {
    /// `max_s d(s) / rho(s)`
    pub kappa: f64,
    /// `min_s d(s)`
    pub min_visit: f64,
}

pub fn mismatch_diagnostics(game: &TabularGame, policy: &JointPolicy, rho: &[f64]) -> Result<MismatchDiagnostics> {
    if let Some(state) = rho.iter().position(|&p| p <= 0.0) {
        return Err(Error::DivisionDomain { state });
    }
    let d = visitation(game, policy, rho)?;
    let kappa = d
        .iter()
        .zip(rho)
        .map(|(d, r)| d / r)
        .fold(f64::NEG_INFINITY, f64::max);
    let min_visit = d.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(MismatchDiagnostics { kappa, min_visit })
}

/// The MDP faced by one agent when every other agent is frozen at its policy.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleAgentMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    /// `[s * A + a]`
    pub rewards: Vec<f64>,
    /// `[(s * A + a) * S + s']`
    pub kernel: Vec<f64>,
}

/// Result of solving a [`SingleAgentMdp`] to optimality.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalSolution {
    /// Greedy action per state, ties broken toward the lowest index.
    pub policy: Vec<usize>,
    pub values: Vec<f64>,
    /// `[s * A + a]`
    pub q: Vec<f64>,
}

/// Marginalize opponents out of agent `agent`'s rewards and of the kernel.
pub fn marginalized_mdp(game: &TabularGame, policy: &JointPolicy, agent: usize) -> Result<SingleAgentMdp> {
    policy.check_shape(game)?;
    let (s_count, j_count) = (game.n_states(), game.n_joint());
    let a_i = game.actions()[agent];
    let joint = game.joint();
    let mut rewards = vec![0.0; s_count * a_i];
    let mut kernel = vec![0.0; s_count * a_i * s_count];
    for s in 0..s_count {
        let w = policy.opponent_probs(s, agent);
        for j in 0..j_count {
            let wj = w[j];
            if wj == 0.0 {
                continue;
            }
            let a = joint.action_of(j, agent);
            rewards[s * a_i + a] += wj * game.reward(agent, s, j);
            let row = &mut kernel[(s * a_i + a) * s_count..(s * a_i + a + 1) * s_count];
            for (acc, p) in row.iter_mut().zip(game.transition(s, j)) {
                *acc += wj * p;
            }
        }
    }
    Ok(SingleAgentMdp {
        n_states: s_count,
        n_actions: a_i,
        gamma: game.gamma(),
        rewards,
        kernel,
    })
}

impl SingleAgentMdp {
    /// Exact values of a stochastic policy `table[s * A + a]`.
    pub fn evaluate(&self, table: &[f64]) -> Result<Vec<f64>> {
        let (s_count, a_count) = (self.n_states, self.n_actions);
        let mut r = vec![0.0; s_count];
        let mut p = vec![0.0; s_count * s_count];
        for s in 0..s_count {
            for a in 0..a_count {
                let w = table[s * a_count + a];
                if w == 0.0 {
                    continue;
                }
                r[s] += w * self.rewards[s * a_count + a];
                let row = &self.kernel[(s * a_count + a) * s_count..(s * a_count + a + 1) * s_count];
                for (acc, x) in p[s * s_count..(s + 1) * s_count].iter_mut().zip(row) {
                    *acc += w * x;
                }
            }
        }
        let m = bellman_matrix(&p, s_count, self.gamma);
        let (v, _) = solve(&m, &DMatrix::from_column_slice(s_count, 1, &r))?;
        Ok(v.iter().copied().collect())
    }

    pub fn evaluate_deterministic(&self, choice: &[usize]) -> Result<Vec<f64>> {
        let mut table = vec![0.0; self.n_states * self.n_actions];
        for (s, &a) in choice.iter().enumerate() {
            table[s * self.n_actions + a] = 1.0;
        }
        self.evaluate(&table)
    }

    /// One Bellman backup `Q(s,a) = r(s,a) + gamma sum_s' P(s'|s,a) V(s')`.
    pub fn q_from_values(&self, values: &[f64]) -> Vec<f64> {
        let s_count = self.n_states;
        (0..s_count * self.n_actions)
            .map(|sa| {
                let row = &self.kernel[sa * s_count..(sa + 1) * s_count];
                self.rewards[sa] + self.gamma * row.iter().zip(values).map(|(p, v)| p * v).sum::<f64>()
            })
            .collect()
    }

    /// Optimal deterministic policy by policy iteration.
    pub fn solve_optimal(&self) -> Result<OptimalSolution> {
        let a_count = self.n_actions;
        let scale = 1.0 + self.rewards.iter().fold(0.0_f64, |m, r| m.max(r.abs())) / (1.0 - self.gamma);
        let tie_tol = 1e-12 * scale;

        let greedy = |q: &[f64], current: Option<&[usize]>| -> Vec<usize> {
            q.chunks_exact(a_count)
                .enumerate()
                .map(|(s, row)| {
                    let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lowest = row.iter().position(|&x| x >= best - tie_tol).unwrap_or(0);
                    match current {
                        // only switch on a strict improvement so the iteration cannot cycle
                        Some(cur) if row[cur[s]] >= row[lowest] - tie_tol => cur[s],
                        _ => lowest,
                    }
                })
                .collect()
        };

        let mut choice = greedy(&self.rewards, None);
        let mut values = self.evaluate_deterministic(&choice)?;
        for _ in 0..10_000 {
            let q = self.q_from_values(&values);
            let next = greedy(&q, Some(&choice));
            if next == choice {
                break;
            }
            choice = next;
            values = self.evaluate_deterministic(&choice)?;
        }
        // canonical tie-breaking on the converged Q
        let q = self.q_from_values(&values);
        let canonical = greedy(&q, None);
        if canonical != choice {
            choice = canonical;
            values = self.evaluate_deterministic(&choice)?;
        }
        let q = self.q_from_values(&values);
        Ok(OptimalSolution {
            policy: choice,
            values,
            q,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_state(rewards: Vec<f64>, gamma: f64) -> TabularGame {
        let a = rewards.len();
        TabularGame::new(&[a], 1, gamma, vec![1.0], vec![rewards], vec![1.0; a]).unwrap()
    }

    fn matching_game() -> TabularGame {
        // 1 state, 2 agents x 2 actions, r_1 = 1{a1 == a2}, r_2 = 0.
        let r1 = vec![1.0, 0.0, 0.0, 1.0];
        TabularGame::new(&[2, 2], 1, 0.0, vec![1.0], vec![r1, vec![0.0; 4]], vec![1.0; 4]).unwrap()
    }

    fn cycle(gamma: f64) -> TabularGame {
        // s0 -> s1 -> s0 deterministically, one agent with one action.
        TabularGame::new(&[1], 2, gamma, vec![1.0, 0.0], vec![vec![1.0, 0.0]], vec![0.0, 1.0, 1.0, 0.0])
            .unwrap()
    }

    #[test]
    fn geometric_series_value() {
        let g = single_state(vec![1.0], 0.99);
        let ev = policy_evaluation(&g, &JointPolicy::uniform_for(&g), 1e-8).unwrap();
        assert!((ev.values[0][0] - 100.0).abs() < 1e-9);
        assert!((ev.visitation[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_armed_bandit_uniform_value() {
        // r = (1, 0), uniform, gamma 0.5: V = 0.5 / (1 - 0.5) = 1.0
        let g = single_state(vec![1.0, 0.0], 0.5);
        let ev = policy_evaluation(&g, &JointPolicy::uniform_for(&g), 1e-8).unwrap();
        assert!((ev.values[0][0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn myopic_case_reduces_to_expected_reward() {
        let g = matching_game();
        let p = JointPolicy::from_tables(1, &[2, 2], vec![vec![0.3, 0.7], vec![0.6, 0.4]]).unwrap();
        let ev = policy_evaluation(&g, &p, 1e-8).unwrap();
        let expect = 0.3 * 0.6 + 0.7 * 0.4;
        assert!((ev.values[0][0] - expect).abs() < 1e-14);
        assert_eq!(ev.visitation, vec![1.0]);
    }

    #[test]
    fn marginal_q_single_agent_is_identity() {
        let g = single_state(vec![3.0, -1.0, 2.0], 0.0);
        let p = JointPolicy::uniform_for(&g);
        let ev = policy_evaluation(&g, &p, 1e-8).unwrap();
        assert_eq!(ev.qbar[0], ev.q[0]);
    }

    #[test]
    fn marginal_q_matching_game() {
        let g = matching_game();
        let uniform = JointPolicy::uniform_for(&g);
        let ev = policy_evaluation(&g, &uniform, 1e-8).unwrap();
        assert_eq!(ev.qbar[0], vec![0.5, 0.5]);

        let det = JointPolicy::from_tables(1, &[2, 2], vec![vec![0.5, 0.5], vec![1.0, 0.0]]).unwrap();
        let ev = policy_evaluation(&g, &det, 1e-8).unwrap();
        assert_eq!(ev.qbar[0], vec![1.0, 0.0]);
    }

    #[test]
    fn bandit_advantage() {
        let g = single_state(vec![1.0, 0.0], 0.0);
        let ev = policy_evaluation(&g, &JointPolicy::uniform_for(&g), 1e-8).unwrap();
        assert_eq!(marginal_advantage(&ev, 0), vec![0.5, -0.5]);
        assert_eq!(ev.advantage[0], vec![0.5, -0.5]);

        let flat = single_state(vec![2.0, 2.0], 0.0);
        let ev = policy_evaluation(&flat, &JointPolicy::uniform_for(&flat), 1e-8).unwrap();
        assert_eq!(ev.advantage[0], vec![0.0, 0.0]);
    }

    #[test]
    fn visitation_cases() {
        let g = cycle(0.5);
        let p = JointPolicy::uniform_for(&g);
        let d = visitation(&g, &p, &[1.0, 0.0]).unwrap();
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-14);
        assert!((d[1] - 1.0 / 3.0).abs() < 1e-14);

        let d0 = visitation(&cycle(0.0), &p, &[0.25, 0.75]).unwrap();
        assert_eq!(d0, vec![0.25, 0.75]);

        let single = single_state(vec![1.0], 0.9);
        assert!((visitation(&single, &JointPolicy::uniform_for(&single), &[1.0]).unwrap()[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn mismatch_cases() {
        let single = single_state(vec![1.0], 0.9);
        let m = mismatch_diagnostics(&single, &JointPolicy::uniform_for(&single), &[1.0]).unwrap();
        assert!((m.kappa - 1.0).abs() < 1e-12);

        let g = cycle(0.0);
        let p = JointPolicy::uniform_for(&g);
        let m = mismatch_diagnostics(&g, &p, &[0.4, 0.6]).unwrap();
        assert!((m.kappa - 1.0).abs() < 1e-12);
        assert!((m.min_visit - 0.4).abs() < 1e-12);

        assert!(matches!(
            mismatch_diagnostics(&g, &p, &[1.0, 0.0]),
            Err(Error::DivisionDomain { state: 1 })
        ));
    }

    #[test]
    fn optimal_solution_prefers_lowest_index_on_ties() {
        let mdp = SingleAgentMdp {
            n_states: 1,
            n_actions: 3,
            gamma: 0.5,
            rewards: vec![1.0, 2.0, 2.0],
            kernel: vec![1.0; 3],
        };
        let sol = mdp.solve_optimal().unwrap();
        assert_eq!(sol.policy, vec![1]);
        assert!((sol.values[0] - 4.0).abs() < 1e-12);
    }
}

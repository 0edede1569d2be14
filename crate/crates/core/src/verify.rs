//! Independent oracles: sensitivity estimation, the cross-game value bound,
//! brute-force stable-policy search and finite-difference gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::equilibrium::{agent_value, candidate_rows, ne_gap, pse_gap, table_from_index, MAX_ENUMERATION};
use crate::error::{Error, Result};
use crate::game::{occupancy_from_policy, policy_evaluation, JointPolicy, ResponseMap, TabularGame, DEFAULT_SOLVE_TOL};
use crate::occupancy_opt::{occ_gradient, policy_from_occupancy};

/// Safety factor applied to sampled sensitivities before they enter a bound.
pub const SENSITIVITY_INFLATION: f64 = 1.5;
/// Absolute slack for comparisons against grid-restricted maxima.
pub const GRID_SLACK: f64 = 1e-8;

/// Empirical Lipschitz estimates of a response map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityParams {
    /// `max ||r_pi - r_pi'|| / ||pi - pi'||`
    pub omega_r: f64,
    /// `max ||P_pi - P_pi'|| / ||pi - pi'||`
    pub omega_p: f64,
    /// Reward sensitivity per unit of occupancy distance.
    pub zeta_r: f64,
    /// Kernel sensitivity per unit of occupancy distance.
    pub zeta_p: f64,
    /// Smoothness of the common-payoff policy gradient; `None` unless rewards are shared.
    pub beta: Option<f64>,
    pub samples: usize,
    pub gamma: f64,
    pub n_states: usize,
    pub delta_rp: f64,
}

impl SensitivityParams {
    /// Copy with `omega_*` and `zeta_*` multiplied by `factor` and `delta_rp` recomputed.
    pub fn inflated(&self, factor: f64) -> Self {
        let mut s = self.clone();
        s.omega_r *= factor;
        s.omega_p *= factor;
        s.zeta_r *= factor;
        s.zeta_p *= factor;
        s.delta_rp = delta_rp(s.omega_r, s.omega_p, s.gamma, s.n_states);
        s
    }
}

/// `(1 / (1 - gamma)) (omega_r + gamma omega_p sqrt(S) / (1 - gamma))`.
pub fn delta_rp(omega_r: f64, omega_p: f64, gamma: f64, n_states: usize) -> f64 {
    (omega_r + gamma * omega_p * (n_states as f64).sqrt() / (1.0 - gamma)) / (1.0 - gamma)
}

/// Uniformly drawn policy whose entries are bounded away from zero.
pub fn random_interior_policy<R: Rng>(rng: &mut R, n_states: usize, actions: &[usize]) -> JointPolicy {
    let tables = actions
        .iter()
        .map(|&a| {
            (0..n_states)
                .flat_map(|_| {
                    let w: Vec<f64> = (0..a).map(|_| rng.random::<f64>() + 0.05).collect();
                    let z: f64 = w.iter().sum();
                    w.into_iter().map(move |x| x / z)
                })
                .collect()
        })
        .collect();
    JointPolicy::from_tables(n_states, actions, tables).expect("normalized rows")
}

fn l2(a: impl Iterator<Item = f64>) -> f64 {
    a.map(|x| x * x).sum::<f64>().sqrt()
}

fn reward_distance(a: &TabularGame, b: &TabularGame) -> f64 {
    l2(a.rewards().iter().flatten().zip(b.rewards().iter().flatten()).map(|(x, y)| x - y))
}

fn kernel_distance(a: &TabularGame, b: &TabularGame) -> f64 {
    l2(a.kernel().iter().zip(b.kernel()).map(|(x, y)| x - y))
}

fn shares_rewards(game: &TabularGame) -> bool {
    game.rewards().windows(2).all(|w| w[0] == w[1])
}

/// Gradient of `V_i(rho)` in policy coordinates, `d(s) Qbar_i(s, a) / (1 - gamma)`.
pub fn policy_gradient(game: &TabularGame, policy: &JointPolicy, agent: usize) -> Result<Vec<f64>> {
    let eval = policy_evaluation(game, policy, DEFAULT_SOLVE_TOL)?;
    let a = game.actions()[agent];
    let scale = 1.0 / (1.0 - game.gamma());
    Ok(eval.qbar[agent]
        .iter()
        .enumerate()
        .map(|(k, q)| scale * eval.visitation[k / a] * q)
        .collect())
}

/// Sample `num_pairs` policy pairs and record the largest observed sensitivity ratios.
pub fn estimate_sensitivity(map: &ResponseMap, num_pairs: usize, seed: u64) -> Result<SensitivityParams> {
    if num_pairs == 0 {
        return Err(Error::Config("at least one policy pair is required".into()));
    }
    let base = map.base();
    let (s_count, actions) = (base.n_states(), base.actions().to_vec());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs: Vec<(JointPolicy, JointPolicy)> = (0..num_pairs)
        .map(|_| {
            let p = random_interior_policy(&mut rng, s_count, &actions);
            let q = random_interior_policy(&mut rng, s_count, &actions);
            let t: f64 = rng.random_range(0.05..=1.0);
            let mixed = p.mix(&q, t).expect("same shape");
            (p, mixed)
        })
        .collect();
    let common = shares_rewards(base);

    let ratios: Vec<[f64; 5]> = pairs
        .par_iter()
        .map(|(p, q)| -> Result<[f64; 5]> {
            let dpi = p.distance(q);
            let (gp, gq) = (map.deploy(p)?, map.deploy(q)?);
            let dr = reward_distance(&gp, &gq);
            let dp = kernel_distance(&gp, &gq);
            let dmu = occupancy_from_policy(&gp, p)?.distance(&occupancy_from_policy(&gq, q)?);
            let beta = if common {
                let a = policy_gradient(base, p, 0)?;
                let b = policy_gradient(base, q, 0)?;
                l2(a.iter().zip(&b).map(|(x, y)| x - y)) / dpi
            } else {
                0.0
            };
            let safe = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
            Ok([safe(dr, dpi), safe(dp, dpi), safe(dr, dmu), safe(dp, dmu), beta])
        })
        .collect::<Result<_>>()?;
    let max = |k: usize| ratios.iter().map(|r| r[k]).fold(0.0, f64::max);
    let (omega_r, omega_p) = (max(0), max(1));
    Ok(SensitivityParams {
        omega_r,
        omega_p,
        zeta_r: max(2),
        zeta_p: max(3),
        beta: common.then(|| max(4)),
        samples: num_pairs,
        gamma: base.gamma(),
        n_states: s_count,
        delta_rp: delta_rp(omega_r, omega_p, base.gamma(), s_count),
    })
}

/// Outcome of checking the cross-game value bound on sampled policy triples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueBoundReport {
    pub triples: usize,
    pub checks: usize,
    pub violations: usize,
    /// Largest `|V_{pi'}^pi(s) - V_{pi''}^pi(s)| / (delta ||pi' - pi''||)` seen.
    pub max_ratio: f64,
    /// Bound constant used, after inflation and reward scaling.
    pub delta: f64,
    pub inflation: f64,
    pub sensitivity: SensitivityParams,
}

/// Check `|V_{i,pi'}^pi(s) - V_{i,pi''}^pi(s)| <= delta ||pi' - pi''||` for every agent and state.
///
/// The kernel term is scaled by `r_max` so that the bound applies to rewards outside `[0, 1]`.
pub fn value_bound_sweep(
    map: &ResponseMap,
    triples: usize,
    sensitivity: &SensitivityParams,
    inflation: f64,
    seed: u64,
) -> Result<ValueBoundReport> {
    let base = map.base();
    let (s_count, actions) = (base.n_states(), base.actions().to_vec());
    let r_scale = base.r_max().max(1.0);
    let delta = delta_rp(
        inflation * sensitivity.omega_r,
        inflation * sensitivity.omega_p * r_scale,
        base.gamma(),
        s_count,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<[JointPolicy; 3]> = (0..triples)
        .map(|_| {
            let pi = random_interior_policy(&mut rng, s_count, &actions);
            let a = random_interior_policy(&mut rng, s_count, &actions);
            let b = random_interior_policy(&mut rng, s_count, &actions);
            let t: f64 = rng.random_range(0.05..=1.0);
            let b = a.mix(&b, t).expect("same shape");
            [pi, a, b]
        })
        .collect();
    let outcomes: Vec<(usize, usize, f64)> = samples
        .par_iter()
        .map(|[pi, a, b]| -> Result<(usize, usize, f64)> {
            let va = policy_evaluation(&map.deploy(a)?, pi, DEFAULT_SOLVE_TOL)?;
            let vb = policy_evaluation(&map.deploy(b)?, pi, DEFAULT_SOLVE_TOL)?;
            let bound = delta * a.distance(b);
            let mut checks = 0;
            let mut violations = 0;
            let mut worst = 0.0_f64;
            for (x, y) in va.values.iter().flatten().zip(vb.values.iter().flatten()) {
                let lhs = (x - y).abs();
                checks += 1;
                if lhs > bound {
                    violations += 1;
                }
                if bound > 0.0 {
                    worst = worst.max(lhs / bound);
                } else if lhs > 0.0 {
                    worst = f64::INFINITY;
                }
            }
            Ok((checks, violations, worst))
        })
        .collect::<Result<_>>()?;
    Ok(ValueBoundReport {
        triples,
        checks: outcomes.iter().map(|o| o.0).sum(),
        violations: outcomes.iter().map(|o| o.1).sum(),
        max_ratio: outcomes.iter().map(|o| o.2).fold(0.0, f64::max),
        delta,
        inflation,
        sensitivity: sensitivity.clone(),
    })
}

/// One grid profile with its stability gap.
#[derive(Debug, Clone, PartialEq)]
pub struct PseCandidate {
    pub policy: JointPolicy,
    pub gap: f64,
}

/// Number of product policies on the grid (`resolution = 0` means vertices only).
pub fn grid_size(map: &ResponseMap, resolution: f64) -> Result<u128> {
    let base = map.base();
    let res = (resolution > 0.0).then_some(resolution);
    let mut total: u128 = 1;
    for &a in base.actions() {
        let rows = candidate_rows(a, res)?.len() as u128;
        let per_agent = rows.checked_pow(base.n_states() as u32).unwrap_or(u128::MAX);
        total = total.saturating_mul(per_agent);
    }
    Ok(total)
}

/// Enumerate every product policy on the grid and keep those with stability gap at most `epsilon`,
/// sorted by gap (ties in enumeration order).
pub fn brute_force_pse(map: &ResponseMap, resolution: f64, epsilon: f64) -> Result<Vec<PseCandidate>> {
    let total = grid_size(map, resolution)?;
    if total > MAX_ENUMERATION {
        return Err(Error::TooLarge {
            count: total,
            limit: MAX_ENUMERATION,
        });
    }
    let base = map.base();
    let s_count = base.n_states();
    let res = (resolution > 0.0).then_some(resolution);
    let rows: Vec<Vec<Vec<f64>>> = base
        .actions()
        .iter()
        .map(|&a| candidate_rows(a, res))
        .collect::<Result<_>>()?;
    let per_agent: Vec<u128> = rows
        .iter()
        .map(|r| (r.len() as u128).pow(s_count as u32))
        .collect();

    let mut hits: Vec<(u128, PseCandidate)> = (0..total)
        .into_par_iter()
        .map(|mut idx| -> Result<Option<(u128, PseCandidate)>> {
            let original = idx;
            let mut tables = vec![Vec::new(); rows.len()];
            for i in (0..rows.len()).rev() {
                tables[i] = table_from_index(&rows[i], s_count, idx % per_agent[i]);
                idx /= per_agent[i];
            }
            let policy = JointPolicy::from_tables(s_count, base.actions(), tables)?;
            let gap = pse_gap(map, &policy)?.max_gap;
            Ok((gap <= epsilon).then_some((original, PseCandidate { policy, gap })))
        })
        .filter_map(|r| r.transpose())
        .collect::<Result<_>>()?;
    hits.sort_by(|a, b| a.1.gap.total_cmp(&b.1.gap).then(a.0.cmp(&b.0)));
    Ok(hits.into_iter().map(|(_, c)| c).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StableImpliesNashReport {
    pub candidates: usize,
    pub violations: usize,
    /// Largest `ne_gap - (pse_gap + delta + slack)` seen (negative when all hold).
    pub max_excess: f64,
    pub delta: f64,
    pub resolution: f64,
}

/// For every grid policy with stability gap at most `epsilon`, check that its
/// (grid) Nash gap is at most its stability gap plus `delta + GRID_SLACK`.
pub fn stable_implies_nash_sweep(
    map: &ResponseMap,
    resolution: f64,
    epsilon: f64,
    sensitivity: &SensitivityParams,
    inflation: f64,
) -> Result<StableImpliesNashReport> {
    let base = map.base();
    let delta = delta_rp(
        inflation * sensitivity.omega_r,
        inflation * sensitivity.omega_p * base.r_max().max(1.0),
        base.gamma(),
        base.n_states(),
    );
    let candidates = brute_force_pse(map, resolution, epsilon)?;
    let res = (resolution > 0.0).then_some(resolution);
    let excess: Vec<f64> = candidates
        .par_iter()
        .map(|c| -> Result<f64> {
            let ne = ne_gap(map, &c.policy, res)?.max_gap;
            Ok(ne - (c.gap + delta + GRID_SLACK))
        })
        .collect::<Result<_>>()?;
    Ok(StableImpliesNashReport {
        candidates: candidates.len(),
        violations: excess.iter().filter(|&&e| e > 0.0).count(),
        max_excess: excess.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        delta,
        resolution,
    })
}

fn check_step(h: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Config(format!("finite-difference step {h} outside [1e-7, 1e-3]")));
    }
    Ok(())
}

/// Largest absolute discrepancy between the policy gradient of `V_i(rho)` and central
/// differences along the feasible directions `e_(s,a) - e_(s,a+1)`.
pub fn finite_diff_check(game: &TabularGame, policy: &JointPolicy, agent: usize, h: f64) -> Result<f64> {
    check_step(h)?;
    if policy.min_entry() <= h {
        return Err(Error::InvalidPolicy(format!("entries must exceed the step {h}")));
    }
    let grad = policy_gradient(game, policy, agent)?;
    let a = game.actions()[agent];
    let mut worst = 0.0_f64;
    for s in 0..game.n_states() {
        for k in 0..a.saturating_sub(1) {
            let bump = |sign: f64| -> Result<f64> {
                let mut table = policy.table(agent).to_vec();
                table[s * a + k] += sign * h;
                table[s * a + k + 1] -= sign * h;
                agent_value(game, &policy.with_agent(agent, table)?, agent)
            };
            let numeric = (bump(1.0)? - bump(-1.0)?) / (2.0 * h);
            let analytic = grad[s * a + k] - grad[s * a + k + 1];
            worst = worst.max((numeric - analytic).abs());
        }
    }
    Ok(worst)
}

/// Largest relative discrepancy between `<g_i, delta>` and central differences of `V_i`
/// when agent `agent`'s occupancy moves along mass-preserving directions.
pub fn occupancy_gradient_check(game: &TabularGame, policy: &JointPolicy, agent: usize, h: f64) -> Result<f64> {
    check_step(h)?;
    let g = occ_gradient(game, policy)?;
    let mu = occupancy_from_policy(game, policy)?;
    let a = game.actions()[agent];
    let scale = g[agent].iter().fold(0.0_f64, |m, x| m.max(x.abs())).max(1e-12);
    let mut worst = 0.0_f64;
    for s in 0..game.n_states() {
        for k in 0..a.saturating_sub(1) {
            let value_at = |sign: f64| -> Result<f64> {
                let mut moved = mu.clone();
                moved.per_agent[agent][s * a + k] += sign * h;
                moved.per_agent[agent][s * a + k + 1] -= sign * h;
                let induced = policy_from_occupancy(&moved);
                let deviated = policy.with_agent(agent, induced.table(agent).to_vec())?;
                agent_value(game, &deviated, agent)
            };
            let numeric = (value_at(1.0)? - value_at(-1.0)?) / (2.0 * h);
            let analytic = g[agent][s * a + k] - g[agent][s * a + k + 1];
            worst = worst.max((numeric - analytic).abs() / scale);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environments::{coordination_bandit, make_test_game, TestGameSpec};

    #[test]
    fn delta_examples() {
        assert_eq!(delta_rp(0.0, 0.0, 0.99, 5), 0.0);
        // 100 * (0.03 + 0.99 * 0.03 * sqrt(5) * 100)
        assert!((delta_rp(0.03, 0.03, 0.99, 5) - 667.1122).abs() < 1e-3);
        assert_eq!(delta_rp(0.2, 0.7, 0.0, 3), 0.2);
    }

    #[test]
    fn constant_map_has_zero_sensitivity() {
        let map = coordination_bandit(0.0).unwrap();
        let s = estimate_sensitivity(&map, 10, 1).unwrap();
        assert_eq!((s.omega_r, s.omega_p, s.zeta_r, s.zeta_p), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(s.delta_rp, 0.0);
    }

    #[test]
    fn deterministic_grid_on_coordination() {
        let map = coordination_bandit(0.0).unwrap();
        assert_eq!(grid_size(&map, 0.0).unwrap(), 4);
        let hits = brute_force_pse(&map, 0.0, 1e-12).unwrap();
        let profiles: Vec<Vec<f64>> = hits.iter().map(|c| c.policy.flatten()).collect();
        assert_eq!(profiles, vec![vec![1.0, 0.0, 1.0, 0.0], vec![0.0, 1.0, 0.0, 1.0]]);
        assert!(hits.iter().all(|c| c.gap == 0.0));
    }

    #[test]
    fn too_large_grid_is_refused() {
        let spec = TestGameSpec::random(3, &[3, 3], 0.5, 0);
        let map = make_test_game(&spec).unwrap();
        assert!(matches!(brute_force_pse(&map, 0.05, 1.0), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn bandit_gradient_is_exact() {
        let g = TabularGame::new(&[3], 1, 0.0, vec![1.0], vec![vec![0.2, 0.9, -0.4]], vec![1.0; 3]).unwrap();
        let p = JointPolicy::from_tables(1, &[3], vec![vec![0.2, 0.3, 0.5]]).unwrap();
        assert_eq!(policy_gradient(&g, &p, 0).unwrap(), vec![0.2, 0.9, -0.4]);
        assert!(finite_diff_check(&g, &p, 0, 1e-5).unwrap() <= 1e-9);
        assert!(finite_diff_check(&g, &p, 0, 1.0).is_err());
    }
}

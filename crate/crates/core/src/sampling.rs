//! Geometric-horizon rollouts, return samples and the tabular estimators built on them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::game::{JointPolicy, TabularGame};
use crate::seed;

/// Hard cap on rollout length, `ceil(50 / (1 - gamma))`.
pub fn horizon_cap(gamma: f64) -> usize {
    (50.0 / (1.0 - gamma)).ceil() as usize
}

/// Per-agent sample from one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentSample {
    /// Offset `h_i` of the anchor step.
    pub start: usize,
    /// Number of summed rewards `h_i'`.
    pub length: usize,
    pub anchor_state: usize,
    pub anchor_action: usize,
    /// `R_i = sum_{h = h_i}^{h_i + h_i' - 1} r_i^h`
    pub ret: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub states: Vec<u32>,
    pub joint_actions: Vec<u32>,
    pub agents: Vec<AgentSample>,
    pub truncated: bool,
}

impl Episode {
    pub fn horizon(&self) -> usize {
        self.states.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub n_agents: usize,
    pub episodes: Vec<Episode>,
    /// Episodes whose horizon hit the cap.
    pub truncated: usize,
}

fn sample_index<R: Rng>(rng: &mut R, weights: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    // rounding left a sliver of mass: fall back to the last supported index
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1)
}

fn sample_episode(game: &TabularGame, policy: &JointPolicy, episode_seed: u64) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed);
    let n = game.n_agents();
    let gamma = game.gamma();
    let cap = horizon_cap(gamma);
    let geom = Geometric::new(1.0 - gamma).map_err(|e| Error::Config(format!("geometric horizon: {e}")))?;

    let mut offsets = Vec::with_capacity(n);
    let mut truncated = false;
    for _ in 0..n {
        let mut start = geom.sample(&mut rng) as usize;
        let mut length = 1 + geom.sample(&mut rng) as usize;
        if start >= cap {
            start = cap - 1;
            truncated = true;
        }
        if start + length > cap {
            length = cap - start;
            truncated = true;
        }
        offsets.push((start, length));
    }
    let horizon = offsets.iter().map(|(h, l)| h + l).max().unwrap_or(0);

    let joint = game.joint();
    let mut states = Vec::with_capacity(horizon);
    let mut joint_actions = Vec::with_capacity(horizon);
    let mut actions = vec![0usize; n];
    let mut s = sample_index(&mut rng, game.rho());
    for step in 0..horizon {
        for (i, a) in actions.iter_mut().enumerate() {
            *a = sample_index(&mut rng, policy.row(i, s));
        }
        let j = joint.encode(&actions);
        states.push(s as u32);
        joint_actions.push(j as u32);
        if step + 1 < horizon {
            s = sample_index(&mut rng, game.transition(s, j));
        }
    }

    let agents = offsets
        .into_iter()
        .enumerate()
        .map(|(i, (start, length))| {
            let ret = (start..start + length)
                .map(|h| game.reward(i, states[h] as usize, joint_actions[h] as usize))
                .sum();
            let anchor_state = states[start] as usize;
            AgentSample {
                start,
                length,
                anchor_state,
                anchor_action: joint.action_of(joint_actions[start] as usize, i),
                ret,
            }
        })
        .collect();
    Ok(Episode {
        states,
        joint_actions,
        agents,
        truncated,
    })
}

/// Roll out `episodes` independent geometric-horizon trajectories of `policy`.
///
/// Episode `k` uses its own generator seeded from `(stream_seed, k)`, so the batch does
/// not depend on how episodes are scheduled across threads.
pub fn sample_batch(game: &TabularGame, policy: &JointPolicy, episodes: usize, stream_seed: u64) -> Result<TrajectoryBatch> {
    policy.check_shape(game)?;
    if episodes == 0 {
        return Err(Error::Config("at least one episode is required".into()));
    }
    if game.n_joint() > u32::MAX as usize || game.n_states() > u32::MAX as usize {
        return Err(Error::TooLarge {
            count: game.n_joint() as u128,
            limit: u32::MAX as u128,
        });
    }
    let episodes: Vec<Episode> = (0..episodes as u64)
        .into_par_iter()
        .map(|k| sample_episode(game, policy, seed::episode_seed(stream_seed, k)))
        .collect::<Result<_>>()?;
    let truncated = episodes.iter().filter(|e| e.truncated).count();
    Ok(TrajectoryBatch {
        n_agents: game.n_agents(),
        episodes,
        truncated,
    })
}

/// Sample count, mean and unbiased variance of the returns anchored at one cell.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CellStats {
    pub count: usize,
    pub mean: f64,
    pub variance: f64,
}

/// Per-`(s, a_i)` statistics of agent `agent`'s returns.
pub fn cell_statistics(batch: &TrajectoryBatch, agent: usize, n_states: usize, n_actions: usize) -> Vec<CellStats> {
    let mut count = vec![0usize; n_states * n_actions];
    let mut sum = vec![0.0; n_states * n_actions];
    let mut sq = vec![0.0; n_states * n_actions];
    for ep in &batch.episodes {
        let x = &ep.agents[agent];
        let c = x.anchor_state * n_actions + x.anchor_action;
        count[c] += 1;
        sum[c] += x.ret;
        sq[c] += x.ret * x.ret;
    }
    (0..n_states * n_actions)
        .map(|c| {
            let k = count[c];
            if k == 0 {
                return CellStats::default();
            }
            let mean = sum[c] / k as f64;
            let variance = if k > 1 {
                ((sq[c] - k as f64 * mean * mean) / (k - 1) as f64).max(0.0)
            } else {
                0.0
            };
            CellStats { count: k, mean, variance }
        })
        .collect()
}

/// Radial projection onto the l2 ball of the given radius.
pub fn clip_to_ball(table: &mut [f64], radius: f64) {
    let norm = table.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > radius {
        let scale = radius / norm;
        table.iter_mut().for_each(|x| *x *= scale);
    }
}

/// Ball radius for agent `agent`: `r_max sqrt(S A_i) / (1 - gamma)`.
pub fn qbar_radius(game: &TabularGame, agent: usize) -> f64 {
    game.r_max() * ((game.n_states() * game.actions()[agent]) as f64).sqrt() / (1.0 - game.gamma())
}

/// Constrained least-squares estimate of every agent's marginal Q table:
/// per-cell sample means, zero on empty cells, clipped to the norm ball.
pub fn estimate_qbar(batch: &TrajectoryBatch, game: &TabularGame) -> Result<Vec<Vec<f64>>> {
    if batch.episodes.is_empty() {
        return Err(Error::Config("empty trajectory batch".into()));
    }
    Ok((0..batch.n_agents)
        .map(|i| {
            let mut q: Vec<f64> = cell_statistics(batch, i, game.n_states(), game.actions()[i])
                .iter()
                .map(|c| c.mean)
                .collect();
            clip_to_ball(&mut q, qbar_radius(game, i));
            q
        })
        .collect())
}

/// Empirical state visitation from the pooled anchor states, which are draws from
/// the discounted visitation distribution.
pub fn estimate_visitation(batch: &TrajectoryBatch, n_states: usize) -> Result<Vec<f64>> {
    if batch.episodes.is_empty() {
        return Err(Error::Config("empty trajectory batch".into()));
    }
    let mut counts = vec![0.0; n_states];
    let mut total = 0.0;
    for ep in &batch.episodes {
        for x in &ep.agents {
            counts[x.anchor_state] += 1.0;
            total += 1.0;
        }
    }
    Ok(counts.into_iter().map(|c| c / total).collect())
}

//! Repeated regularized optimization in occupancy-measure space for games whose
//! transitions do not depend on the agents' actions.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::equilibrium::{gap_in_game, pse_gap, RoundRecord, RunHistory};
use crate::error::{Error, Result};
use crate::game::{
    marginalized_mdp, mismatch_diagnostics, occupancy_from_policy, policy_evaluation, require_agent_independent,
    JointPolicy, OccupancyMeasure, ResponseMap, TabularGame, DEFAULT_SOLVE_TOL, STRUCTURAL_TOL,
};

pub const INNER_MAX_ITERS: usize = 10_000;
pub const INNER_TOL: f64 = 1e-8;
const DYKSTRA_MAX_ITERS: usize = 100_000;

/// `g_i(s, a_i)`: agent `i`'s reward with the opponents marginalized out.
pub fn occ_gradient(game: &TabularGame, policy: &JointPolicy) -> Result<Vec<Vec<f64>>> {
    require_agent_independent(game, STRUCTURAL_TOL)?;
    (0..game.n_agents())
        .map(|i| marginalized_mdp(game, policy, i).map(|m| m.rewards))
        .collect()
}

/// Normalize each state's occupancy row; rows without mass become uniform.
pub fn policy_from_occupancy(mu: &OccupancyMeasure) -> JointPolicy {
    let tables = mu
        .per_agent
        .iter()
        .zip(&mu.actions)
        .map(|(table, &a)| {
            table
                .chunks_exact(a)
                .flat_map(|row| {
                    let mass: f64 = row.iter().map(|x| x.max(0.0)).sum();
                    row.iter()
                        .map(|x| if mass > 0.0 { x.max(0.0) / mass } else { 1.0 / a as f64 })
                        .collect::<Vec<_>>()
                })
                .collect()
        })
        .collect();
    JointPolicy::from_tables_unchecked(mu.n_states, &mu.actions, tables)
}

/// The flow polytope `{mu >= 0 : C mu = rho}` of one agent under a state-only kernel,
/// with `C[s, (s', a)] = 1{s = s'} - gamma P(s | s')`.
#[derive(Debug, Clone)]
pub struct FlowPolytope {
    n_states: usize,
    n_actions: usize,
    c: DMatrix<f64>,
    cct_inv: DMatrix<f64>,
    rho: DVector<f64>,
}

impl FlowPolytope {
    pub fn new(game: &TabularGame, n_actions: usize) -> Result<Self> {
        require_agent_independent(game, STRUCTURAL_TOL)?;
        let s_count = game.n_states();
        let gamma = game.gamma();
        let c = DMatrix::from_fn(s_count, s_count * n_actions, |s, col| {
            let sp = col / n_actions;
            let id = if s == sp { 1.0 } else { 0.0 };
            id - gamma * game.transition(sp, 0)[s]
        });
        let cct_inv = (&c * c.transpose())
            .try_inverse()
            .ok_or_else(|| Error::SolveFailure("flow constraint Gram matrix is singular".into()))?;
        Ok(Self {
            n_states: s_count,
            n_actions,
            c,
            cct_inv,
            rho: DVector::from_column_slice(game.rho()),
        })
    }

    pub fn dim(&self) -> usize {
        self.n_states * self.n_actions
    }

    fn project_affine(&self, x: &DVector<f64>) -> DVector<f64> {
        let r = &self.c * x - &self.rho;
        x - self.c.transpose() * (&self.cct_inv * r)
    }

    /// Max-norm violation of the flow equalities.
    pub fn flow_residual(&self, x: &[f64]) -> f64 {
        (&self.c * DVector::from_column_slice(x) - &self.rho).amax()
    }

    /// Euclidean projection by Dykstra's alternating scheme between the flow
    /// equalities and the nonnegative orthant.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut x = DVector::from_column_slice(v);
        let mut p = DVector::zeros(n);
        let mut q = DVector::zeros(n);
        let scale = 1.0 + x.amax();
        for _ in 0..DYKSTRA_MAX_ITERS {
            let y = self.project_affine(&(&x + &p));
            p = &x + &p - &y;
            let z = (&y + &q).map(|e| e.max(0.0));
            q = &y + &q - &z;
            let change = (&z - &x).amax();
            x = z;
            if change <= 1e-15 * scale {
                break;
            }
        }
        x.iter().copied().collect()
    }
}

/// Outcome of one agent's inner solve.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerSolve {
    pub mu: Vec<f64>,
    pub iterations: usize,
    /// Norm of the projected-gradient mapping at the returned point.
    pub kkt_residual: f64,
    pub stalled: bool,
}

/// `max_{mu in D} <g, mu> - (lambda / 2) ||mu||^2` by projected gradient ascent with step `1 / lambda`.
pub fn solve_regularized(poly: &FlowPolytope, g: &[f64], lambda: f64, start: &[f64]) -> InnerSolve {
    let step = 1.0 / lambda;
    let mut mu = start.to_vec();
    let mut kkt_residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < INNER_MAX_ITERS {
        iterations += 1;
        let target: Vec<f64> = mu.iter().zip(g).map(|(m, g)| m + step * (g - lambda * m)).collect();
        let next = poly.project(&target);
        let moved = next.iter().zip(&mu).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        mu = next;
        kkt_residual = moved / step;
        if moved <= INNER_TOL {
            break;
        }
    }
    InnerSolve {
        mu,
        iterations,
        kkt_residual,
        stalled: !(kkt_residual / lambda <= INNER_TOL),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccOptState {
    pub mu: OccupancyMeasure,
    pub policy: JointPolicy,
    pub lambda: f64,
    /// `||mu^{t+1} - mu^t||_2` of the step that produced this state.
    pub step_residual: Option<f64>,
    /// Largest inner KKT residual over agents in that step.
    pub inner_residual: f64,
    pub stalled: bool,
}

impl OccOptState {
    /// Uniform policy and its occupancy in the game it deploys.
    pub fn initial(map: &ResponseMap, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("lambda_occ must be positive, got {lambda}")));
        }
        let policy = JointPolicy::uniform_for(map.base());
        let game = map.deploy(&policy)?;
        require_agent_independent(&game, STRUCTURAL_TOL)?;
        let mu = occupancy_from_policy(&game, &policy)?;
        Ok(Self {
            mu,
            policy,
            lambda,
            step_residual: None,
            inner_residual: 0.0,
            stalled: false,
        })
    }
}

/// Deploy the current policy, solve every agent's regularized problem, recover the policy.
pub fn repeated_opt_step(map: &ResponseMap, state: &OccOptState) -> Result<OccOptState> {
    let game = map.deploy(&state.policy)?;
    let grads = occ_gradient(&game, &state.policy)?;
    let solves: Vec<InnerSolve> = (0..game.n_agents())
        .into_par_iter()
        .map(|i| -> Result<InnerSolve> {
            let poly = FlowPolytope::new(&game, game.actions()[i])?;
            Ok(solve_regularized(&poly, &grads[i], state.lambda, &state.mu.per_agent[i]))
        })
        .collect::<Result<_>>()?;
    let inner_residual = solves.iter().map(|s| s.kkt_residual).fold(0.0, f64::max);
    let stalled = solves.iter().any(|s| s.stalled);
    let mu = OccupancyMeasure {
        actions: state.mu.actions.clone(),
        n_states: state.mu.n_states,
        per_agent: solves.into_iter().map(|s| s.mu).collect(),
    };
    let step_residual = mu.distance(&state.mu);
    Ok(OccOptState {
        policy: policy_from_occupancy(&mu),
        mu,
        lambda: state.lambda,
        step_residual: Some(step_residual),
        inner_residual,
        stalled,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointReport {
    pub rounds: usize,
    pub final_residual: f64,
    pub final_pse_gap: f64,
    pub gap_bound: f64,
    pub lambda: f64,
}

/// `kappa / (min_s alpha(s) (1 - gamma)) * (sqrt(A_max) delta + lambda / (2 (1 - gamma)))`.
pub fn fixed_point_bound(kappa: f64, min_alpha: f64, gamma: f64, a_max: usize, delta: f64, lambda: f64) -> f64 {
    kappa / (min_alpha * (1.0 - gamma)) * ((a_max as f64).sqrt() * delta + lambda / (2.0 * (1.0 - gamma)))
}

/// Iterate [`repeated_opt_step`] for at most `rounds` rounds, stopping early once the
/// step residual is at most `tol`.
pub fn run_repeated(map: &ResponseMap, lambda: f64, rounds: usize, tol: f64) -> Result<(RunHistory, FixedPointReport)> {
    require_agent_independent(map.base(), STRUCTURAL_TOL)?;
    if rounds < 1 {
        return Err(Error::Config("rounds must be at least 1".into()));
    }
    let mut history = RunHistory::new(serde_json::Value::Null, 0, crate::learners::DEFAULT_WINDOW);
    let mut state = OccOptState::initial(map, lambda)?;
    let mut stalls = 0usize;
    let mut final_residual = f64::INFINITY;
    for t in 1..=rounds {
        let start = Instant::now();
        let game = map.deploy(&state.policy)?;
        let eval = policy_evaluation(&game, &state.policy, DEFAULT_SOLVE_TOL)?;
        let gap = gap_in_game(&game, &eval, &state.policy)?;
        let values = (0..game.n_agents()).map(|i| eval.value_at(i, game.rho())).collect();
        let next = repeated_opt_step(map, &state)?;
        stalls += usize::from(next.stalled);
        final_residual = next.step_residual.unwrap_or(f64::INFINITY);
        history.push(RoundRecord {
            t,
            policy: std::mem::replace(&mut state, next).policy,
            values,
            pse_gap: gap.max_gap,
            policy_distance: 0.0,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            min_normalizer: None,
            step_residual: Some(final_residual),
        })?;
        if final_residual <= tol {
            break;
        }
    }
    if stalls > 0 {
        history
            .warnings
            .push(format!("inner solve missed tolerance {INNER_TOL:e} in {stalls} rounds"));
    }
    history.finalize_distances();

    let game = map.deploy(&state.policy)?;
    let final_pse_gap = pse_gap(map, &state.policy)?.max_gap;
    let kappa = mismatch_diagnostics(&game, &state.policy, game.rho())?.kappa;
    let mu_final = occupancy_from_policy(&game, &state.policy)?;
    let min_alpha = (0..game.n_agents())
        .flat_map(|i| mu_final.state_mass(i))
        .fold(f64::INFINITY, f64::min);
    let a_max = game.actions().iter().copied().max().unwrap_or(1);
    let report = FixedPointReport {
        rounds: history.len(),
        final_residual,
        final_pse_gap,
        gap_bound: fixed_point_bound(kappa, min_alpha, game.gamma(), a_max, final_residual, lambda),
        lambda,
    };
    Ok((history, report))
}

//! Independent learning dynamics: projected gradient ascent (two variants),
//! natural policy gradient, log-barrier regularized NPG and the run loop.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::equilibrium::{gap_in_game, RoundRecord, RunHistory};
use crate::error::{Error, Result};
use crate::game::{policy_evaluation, EvalResult, JointPolicy, ResponseMap, TabularGame, DEFAULT_SOLVE_TOL};
use crate::{occupancy_opt, sampling, seed};

pub const DEFAULT_ETA: f64 = 1e-4;
pub const DEFAULT_EPISODES: usize = 20;
pub const DEFAULT_ROUNDS: usize = 10_000;
pub const DEFAULT_LAMBDA_REG: f64 = 0.003;
pub const DEFAULT_D_FLOOR: f64 = 1e-9;
pub const DEFAULT_WINDOW: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "IPGA_L")]
    IpgaL,
    #[serde(rename = "IPGA_D")]
    IpgaD,
    #[serde(rename = "INPG")]
    Inpg,
    #[serde(rename = "INPG_REG")]
    InpgReg,
    #[serde(rename = "OCC_OPT")]
    OccOpt,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::IpgaL => "IPGA_L",
            Algorithm::IpgaD => "IPGA_D",
            Algorithm::Inpg => "INPG",
            Algorithm::InpgReg => "INPG_REG",
            Algorithm::OccOpt => "OCC_OPT",
        }
    }

    pub fn is_ipga(self) -> bool {
        matches!(self, Algorithm::IpgaL | Algorithm::IpgaD)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientMode {
    Exact,
    #[default]
    Sampled,
}

/// Which gradient the projected ascent step follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IpgaVariant {
    /// `g = d(s) Qbar(s, a)`
    L,
    /// `g = Qbar(s, a)`
    D,
}

fn default_eta() -> f64 {
    DEFAULT_ETA
}
fn default_rounds() -> usize {
    DEFAULT_ROUNDS
}
fn default_episodes() -> usize {
    DEFAULT_EPISODES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgoConfig {
    pub algorithm: Algorithm,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_reg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_occ: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xi: Option<f64>,
    #[serde(default = "default_rounds", alias = "T")]
    pub rounds: usize,
    #[serde(default)]
    pub gradient_mode: GradientMode,
    #[serde(default = "default_episodes", alias = "K")]
    pub episodes: usize,
    #[serde(default)]
    pub seed: u64,
}

impl AlgoConfig {
    pub fn new(algorithm: Algorithm) -> Self {
        Self {
            algorithm,
            eta: DEFAULT_ETA,
            lambda_reg: None,
            lambda_occ: None,
            xi: None,
            rounds: DEFAULT_ROUNDS,
            gradient_mode: GradientMode::default(),
            episodes: DEFAULT_EPISODES,
            seed: 0,
        }
    }

    pub fn exact(algorithm: Algorithm, eta: f64, rounds: usize) -> Self {
        Self {
            eta,
            rounds,
            gradient_mode: GradientMode::Exact,
            ..Self::new(algorithm)
        }
    }

    /// Log-barrier weight, defaulted for the regularized algorithm.
    pub fn lambda_reg(&self) -> f64 {
        self.lambda_reg.unwrap_or(DEFAULT_LAMBDA_REG)
    }

    pub fn xi(&self) -> f64 {
        self.xi.unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return fail(format!("eta must be positive, got {}", self.eta));
        }
        if self.rounds < 1 {
            return fail("rounds must be at least 1".into());
        }
        if self.episodes < 1 {
            return fail("episodes must be at least 1".into());
        }
        if let Some(l) = self.lambda_reg {
            if self.algorithm != Algorithm::InpgReg {
                return fail(format!("lambda_reg is only valid for INPG_REG, not {}", self.algorithm.name()));
            }
            if !(l >= 0.0 && l.is_finite()) {
                return fail(format!("lambda_reg must be nonnegative, got {l}"));
            }
        }
        match (self.algorithm, self.lambda_occ) {
            (Algorithm::OccOpt, None) => return fail("OCC_OPT requires lambda_occ".into()),
            (Algorithm::OccOpt, Some(l)) if !(l > 0.0 && l.is_finite()) => {
                return fail(format!("lambda_occ must be positive, got {l}"))
            }
            (a, Some(_)) if a != Algorithm::OccOpt => {
                return fail(format!("lambda_occ is only valid for OCC_OPT, not {}", a.name()))
            }
            _ => {}
        }
        if let Some(x) = self.xi {
            if !self.algorithm.is_ipga() {
                return fail(format!("xi is only valid for IPGA variants, not {}", self.algorithm.name()));
            }
            if !(0.0..=0.5).contains(&x) {
                return fail(format!("xi must lie in [0, 1/2], got {x}"));
            }
        }
        Ok(())
    }
}

/// Step size prescribed by the convergence theory, scaled by `1 / r_max`:
/// `(1 - gamma)^4 / (8 min(kappa, S)^3 n A_max)`.
pub fn theory_step_size(game: &TabularGame, kappa: f64) -> f64 {
    let c = kappa.min(game.n_states() as f64);
    let a_max = *game.actions().iter().max().unwrap_or(&1) as f64;
    let r = if game.r_max() > 0.0 { game.r_max() } else { 1.0 };
    (1.0 - game.gamma()).powi(4) / (8.0 * c.powi(3) * game.n_agents() as f64 * a_max) / r
}

/// The first-order information a step consumes, exact or estimated.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// `qbar[i][s * A_i + a]`
    pub qbar: Vec<Vec<f64>>,
    /// `advantage[i][s * A_i + a]`
    pub advantage: Vec<Vec<f64>>,
    pub visitation: Vec<f64>,
}

impl Gradients {
    pub fn from_eval(eval: &EvalResult) -> Self {
        Self {
            qbar: eval.qbar.clone(),
            advantage: eval.advantage.clone(),
            visitation: eval.visitation.clone(),
        }
    }

    /// Advantages from (estimated) marginal Q tables, with `V(s) = sum_a pi(a|s) Qbar(s, a)`.
    pub fn from_estimates(policy: &JointPolicy, qbar: Vec<Vec<f64>>, visitation: Vec<f64>) -> Self {
        let advantage = qbar
            .iter()
            .enumerate()
            .map(|(i, q)| {
                let a = policy.actions()[i];
                let mut adv = q.clone();
                for (s, row) in adv.chunks_exact_mut(a).enumerate() {
                    let v: f64 = row.iter().zip(policy.row(i, s)).map(|(q, p)| q * p).sum();
                    row.iter_mut().for_each(|x| *x -= v);
                }
                adv
            })
            .collect();
        Self {
            qbar,
            advantage,
            visitation,
        }
    }
}

/// Euclidean projection onto the probability simplex (sort and threshold).
pub fn simplex_project(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("simplex projection input"));
    }
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, &x) in u.iter().enumerate() {
        cumsum += x;
        let t = (cumsum - 1.0) / (k + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    Ok(v.iter().map(|x| (x - theta).max(0.0)).collect())
}

fn check_shapes(policy: &JointPolicy, grads: &Gradients) -> Result<()> {
    let ok = grads.qbar.len() == policy.n_agents()
        && grads.advantage.len() == policy.n_agents()
        && grads.visitation.len() == policy.n_states()
        && (0..policy.n_agents()).all(|i| {
            grads.qbar[i].len() == policy.table(i).len() && grads.advantage[i].len() == policy.table(i).len()
        });
    if ok {
        Ok(())
    } else {
        Err(Error::ShapeMismatch("gradient tables do not match the policy".into()))
    }
}

/// Simultaneous projected gradient ascent for every agent.
pub fn ipga_step(policy: &JointPolicy, grads: &Gradients, eta: f64, variant: IpgaVariant) -> Result<JointPolicy> {
    check_shapes(policy, grads)?;
    let mut tables = Vec::with_capacity(policy.n_agents());
    for i in 0..policy.n_agents() {
        let a = policy.actions()[i];
        let mut table = Vec::with_capacity(policy.table(i).len());
        for s in 0..policy.n_states() {
            let weight = match variant {
                IpgaVariant::L => grads.visitation[s],
                IpgaVariant::D => 1.0,
            };
            let q = &grads.qbar[i][s * a..(s + 1) * a];
            let raised: Vec<f64> = policy.row(i, s).iter().zip(q).map(|(p, g)| p + eta * weight * g).collect();
            table.extend(simplex_project(&raised)?);
        }
        tables.push(table);
    }
    Ok(JointPolicy::from_tables_unchecked(policy.n_states(), policy.actions(), tables))
}

/// Result of a multiplicative (natural gradient) step.
#[derive(Debug, Clone, PartialEq)]
pub struct NpgStep {
    pub policy: JointPolicy,
    /// Smallest normalizer `Z_i(s)` over agents and states.
    pub min_normalizer: f64,
    /// True when some visitation fell below the floor and was clamped.
    pub floor_clamped: bool,
    /// Number of probabilities that underflowed and were raised to [`PROB_FLOOR`].
    pub underflowed: usize,
}

/// Smallest probability a multiplicative step may produce.
pub const PROB_FLOOR: f64 = f64::MIN_POSITIVE;

fn require_interior(policy: &JointPolicy) -> Result<()> {
    for i in 0..policy.n_agents() {
        let a = policy.actions()[i];
        if let Some(k) = policy.table(i).iter().position(|&p| p <= 0.0) {
            return Err(Error::BoundaryPolicy {
                agent: i,
                state: k / a,
                action: k % a,
            });
        }
    }
    Ok(())
}

/// `pi'(a) = pi(a) exp(x(a)) / Z` for every row, with `Z = sum_a pi(a) exp(x(a))`.
fn multiplicative_update<F>(policy: &JointPolicy, mut exponent: F) -> NpgStep
where
    F: FnMut(usize, usize, usize) -> f64,
{
    let mut min_normalizer = f64::INFINITY;
    let mut underflowed = 0;
    let mut tables = Vec::with_capacity(policy.n_agents());
    for i in 0..policy.n_agents() {
        let a = policy.actions()[i];
        let mut table = Vec::with_capacity(policy.table(i).len());
        for s in 0..policy.n_states() {
            let x: Vec<f64> = (0..a).map(|k| exponent(i, s, k)).collect();
            let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = policy.row(i, s).iter().zip(&x).map(|(p, x)| p * (x - m).exp()).collect();
            let sum: f64 = w.iter().sum();
            min_normalizer = min_normalizer.min(sum * m.exp());
            let start = table.len();
            table.extend(w.iter().map(|w| w / sum));
            let row = &mut table[start..];
            if row.iter().any(|&p| p < PROB_FLOOR) {
                underflowed += row.iter().filter(|&&p| p < PROB_FLOOR).count();
                row.iter_mut().for_each(|p| *p = p.max(PROB_FLOOR));
                let z: f64 = row.iter().sum();
                row.iter_mut().for_each(|p| *p /= z);
            }
        }
        tables.push(table);
    }
    NpgStep {
        policy: JointPolicy::from_tables_unchecked(policy.n_states(), policy.actions(), tables),
        min_normalizer,
        floor_clamped: false,
        underflowed,
    }
}

/// Independent natural policy gradient under softmax parameterization.
pub fn inpg_step(policy: &JointPolicy, grads: &Gradients, eta: f64, gamma: f64) -> Result<NpgStep> {
    check_shapes(policy, grads)?;
    require_interior(policy)?;
    let c = eta / (1.0 - gamma);
    let actions = policy.actions().to_vec();
    Ok(multiplicative_update(policy, |i, s, k| {
        c * grads.advantage[i][s * actions[i] + k]
    }))
}

/// Natural policy gradient on the log-barrier regularized objective.
///
/// Exponent `eta * (Abar / (1 - gamma) + lambda / (d pi) - lambda |A| / d)`, with `d`
/// clamped below at `d_floor`.
pub fn inpg_reg_step(
    policy: &JointPolicy,
    grads: &Gradients,
    eta: f64,
    lambda: f64,
    gamma: f64,
    d_floor: f64,
) -> Result<NpgStep> {
    check_shapes(policy, grads)?;
    require_interior(policy)?;
    let clamped = grads.visitation.iter().any(|&d| d < d_floor);
    let d: Vec<f64> = grads.visitation.iter().map(|&d| d.max(d_floor)).collect();
    let actions = policy.actions().to_vec();
    let mut step = multiplicative_update(policy, |i, s, k| {
        let a = actions[i];
        let adv = grads.advantage[i][s * a + k] / (1.0 - gamma);
        if lambda == 0.0 {
            return eta * adv;
        }
        let p = policy.prob(i, s, k);
        eta * (adv + lambda / (d[s] * p) - lambda * a as f64 / d[s])
    });
    step.floor_clamped = clamped;
    Ok(step)
}

/// `(1 - xi) pi + xi / |A_i|` for every row.
pub fn xi_greedy(policy: &JointPolicy, xi: f64) -> Result<JointPolicy> {
    if !(0.0..=1.0).contains(&xi) {
        return Err(Error::Config(format!("xi must lie in [0, 1], got {xi}")));
    }
    if xi == 0.0 {
        return Ok(policy.clone());
    }
    let tables = (0..policy.n_agents())
        .map(|i| {
            let u = xi / policy.actions()[i] as f64;
            policy.table(i).iter().map(|p| (1.0 - xi) * p + u).collect()
        })
        .collect();
    Ok(JointPolicy::from_tables_unchecked(policy.n_states(), policy.actions(), tables))
}

/// Run `cfg` against `map` from the uniform policy with the default metric window.
pub fn run(map: &ResponseMap, cfg: &AlgoConfig) -> Result<RunHistory> {
    run_windowed(map, cfg, DEFAULT_WINDOW)
}

pub fn run_windowed(map: &ResponseMap, cfg: &AlgoConfig, window: usize) -> Result<RunHistory> {
    run_observed(map, cfg, window, &mut |_| Ok(()))
}

/// Like [`run_windowed`], calling `observe` on every round as soon as it is recorded.
/// `policy_distance` is only final in the returned history.
pub fn run_observed(
    map: &ResponseMap,
    cfg: &AlgoConfig,
    window: usize,
    observe: &mut dyn FnMut(&RoundRecord) -> Result<()>,
) -> Result<RunHistory> {
    cfg.validate()?;
    if cfg.algorithm == Algorithm::OccOpt {
        let lambda = cfg.lambda_occ.unwrap_or_default();
        let (mut history, _) = occupancy_opt::run_repeated(map, lambda, cfg.rounds, 0.0)?;
        history.config = serde_json::to_value(cfg)?;
        history.seed = cfg.seed;
        history.window = window;
        history.rounds.iter().try_for_each(&mut *observe)?;
        history.finalize_distances();
        return Ok(history);
    }

    let gamma = map.base().gamma();
    let mut history = RunHistory::new(serde_json::to_value(cfg)?, cfg.seed, window);
    let mut policy = JointPolicy::uniform_for(map.base());
    let mut clamped_rounds = 0usize;
    let mut truncated_episodes = 0usize;
    let mut underflowed = 0usize;

    for t in 1..=cfg.rounds {
        let start = Instant::now();
        let game = map.deploy(&policy)?;
        let eval = policy_evaluation(&game, &policy, DEFAULT_SOLVE_TOL)?;
        let gap = gap_in_game(&game, &eval, &policy)?;
        let values = (0..game.n_agents()).map(|i| eval.value_at(i, game.rho())).collect();

        let grads = match cfg.gradient_mode {
            GradientMode::Exact => Gradients::from_eval(&eval),
            GradientMode::Sampled => {
                let round_seed = seed::round_seed(cfg.seed, t as u64);
                let batch = sampling::sample_batch(&game, &policy, cfg.episodes, round_seed)?;
                truncated_episodes += batch.truncated;
                let qbar = sampling::estimate_qbar(&batch, &game)?;
                let d = sampling::estimate_visitation(&batch, game.n_states())?;
                Gradients::from_estimates(&policy, qbar, d)
            }
        };

        let (next, min_normalizer) = match cfg.algorithm {
            Algorithm::IpgaL | Algorithm::IpgaD => {
                let variant = if cfg.algorithm == Algorithm::IpgaL {
                    IpgaVariant::L
                } else {
                    IpgaVariant::D
                };
                let mut next = ipga_step(&policy, &grads, cfg.eta, variant)?;
                if cfg.gradient_mode == GradientMode::Sampled {
                    next = xi_greedy(&next, cfg.xi())?;
                }
                (next, None)
            }
            Algorithm::Inpg => {
                let step = inpg_step(&policy, &grads, cfg.eta, gamma)?;
                underflowed += step.underflowed;
                (step.policy, Some(step.min_normalizer))
            }
            Algorithm::InpgReg => {
                let step = inpg_reg_step(&policy, &grads, cfg.eta, cfg.lambda_reg(), gamma, DEFAULT_D_FLOOR)?;
                clamped_rounds += usize::from(step.floor_clamped);
                underflowed += step.underflowed;
                (step.policy, Some(step.min_normalizer))
            }
            Algorithm::OccOpt => unreachable!("handled above"),
        };

        history.push(RoundRecord {
            t,
            policy: std::mem::replace(&mut policy, next),
            values,
            pse_gap: gap.max_gap,
            policy_distance: 0.0,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            min_normalizer,
            step_residual: None,
        })?;
        observe(history.rounds.last().expect("just pushed"))?;
    }

    if clamped_rounds > 0 {
        history.warnings.push(format!(
            "visitation below {DEFAULT_D_FLOOR:e} clamped in {clamped_rounds} rounds"
        ));
    }
    if underflowed > 0 {
        history.warnings.push(format!(
            "{underflowed} probabilities underflowed in multiplicative steps and were raised to {PROB_FLOOR:e}"
        ));
    }
    if truncated_episodes > 0 {
        history
            .warnings
            .push(format!("horizon cap truncated {truncated_episodes} episodes"));
    }
    history.finalize_distances();
    Ok(history)
}

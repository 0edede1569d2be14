use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ExperimentConfig;
use crate::equilibrium::MAX_ENUMERATION;
use crate::error::Result;
use crate::verify::{
    estimate_sensitivity, finite_diff_check, grid_size, policy_gradient, random_interior_policy,
    stable_implies_nash_sweep, value_bound_sweep, SensitivityParams, StableImpliesNashReport, ValueBoundReport,
    SENSITIVITY_INFLATION,
};

/// Relative tolerance for the finite-difference gradient check.
pub const GRADIENT_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub agent: usize,
    pub max_abs_error: f64,
    pub relative_error: f64,
}

/// Every sweep `perfmpg verify` runs, with a total violation count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub environment: String,
    pub sensitivity: SensitivityParams,
    pub value_bound: ValueBoundReport,
    pub stable_implies_nash: Option<StableImpliesNashReport>,
    pub gradient_checks: Vec<GradientCheck>,
    pub skipped: Vec<String>,
    pub violations: usize,
}

pub fn run_verify(cfg: &ExperimentConfig) -> Result<VerifyReport> {
    let opts = &cfg.verify;
    let map = cfg.env.build()?;
    let base = map.base();
    let sensitivity = estimate_sensitivity(&map, opts.pairs, opts.seed)?;
    let value_bound = value_bound_sweep(&map, opts.triples, &sensitivity, SENSITIVITY_INFLATION, opts.seed ^ 1)?;

    let mut skipped = Vec::new();
    let size = grid_size(&map, opts.resolution)?;
    let stable_implies_nash = if size <= MAX_ENUMERATION {
        Some(stable_implies_nash_sweep(
            &map,
            opts.resolution,
            opts.epsilon,
            &sensitivity,
            SENSITIVITY_INFLATION,
        )?)
    } else {
        skipped.push(format!(
            "stable-implies-Nash sweep: {size} grid profiles at resolution {} exceed {MAX_ENUMERATION}",
            opts.resolution
        ));
        None
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 2);
    let probe = random_interior_policy(&mut rng, base.n_states(), base.actions());
    let gradient_checks = (0..base.n_agents())
        .map(|i| -> Result<GradientCheck> {
            let err = finite_diff_check(base, &probe, i, opts.fd_step)?;
            let scale = policy_gradient(base, &probe, i)?
                .iter()
                .fold(1.0_f64, |m, g| m.max(g.abs()));
            Ok(GradientCheck {
                agent: i,
                max_abs_error: err,
                relative_error: err / scale,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let violations = value_bound.violations
        + stable_implies_nash.as_ref().map_or(0, |r| r.violations)
        + gradient_checks
            .iter()
            .filter(|g| g.relative_error > GRADIENT_TOLERANCE)
            .count();
    Ok(VerifyReport {
        environment: cfg.env.name().to_string(),
        sensitivity,
        value_bound,
        stable_implies_nash,
        gradient_checks,
        skipped,
        violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coordination_passes_every_sweep() {
        let cfg = ExperimentConfig::parse_str(
            r#"{"env": {"name": "coordination", "omega_r": 0.05}, "alg": "IPGA_D",
                "verify": {"pairs": 10, "triples": 10, "resolution": 0.1}}"#,
            &[],
        )
        .unwrap();
        let report = run_verify(&cfg).unwrap();
        assert_eq!(report.violations, 0, "{report:?}");
        assert!(report.stable_implies_nash.unwrap().candidates > 0);
        assert!(report.skipped.is_empty());
    }
}

//! Acceptance suite: one line per criterion, nonzero exit if any criterion fails.
//!
//! Run with `cargo test -p perfmpg-core --test acceptance`.

use std::time::{Duration, Instant};

use perfmpg_core::environments::{
    coordination_bandit, make_congestion, make_safe_distancing, make_test_game, safe_distancing_base, CongestionParams,
    LinearShift, SafeDistancingParams, TestGameSpec, CONGESTION_SCHEDULE, DISTANCING, SAFE,
};
use perfmpg_core::equilibrium::{agent_value, best_response, common_value_potential, verify_mpg_identity};
use perfmpg_core::experiment::{run_experiment, ExperimentConfig};
use perfmpg_core::game::{policy_evaluation, DEFAULT_SOLVE_TOL};
use perfmpg_core::learners::{run, theory_step_size, AlgoConfig, Algorithm, DEFAULT_LAMBDA_REG};
use perfmpg_core::occupancy_opt::run_repeated;
use perfmpg_core::sampling::{estimate_qbar, sample_batch};
use perfmpg_core::verify::{
    estimate_sensitivity, finite_diff_check, occupancy_gradient_check, policy_gradient, random_interior_policy,
    stable_implies_nash_sweep, value_bound_sweep, SENSITIVITY_INFLATION,
};
use perfmpg_core::{JointPolicy, Result, RunHistory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

type Check = fn() -> Result<Outcome>;

fn random_spec(rng: &mut ChaCha8Rng, max_states: usize, actions: &[usize]) -> TestGameSpec {
    TestGameSpec::random(
        rng.random_range(1..=max_states),
        actions,
        rng.random_range(0.5..0.95),
        rng.random(),
    )
}

fn c1_best_response_oracle() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0_f64;
    for _ in 0..20 {
        let spec = random_spec(&mut rng, 2, &[2, 2]);
        let map = make_test_game(&spec)?;
        let game = map.base();
        let pi = random_interior_policy(&mut rng, game.n_states(), game.actions());
        for i in 0..2 {
            let s_count = game.n_states();
            let mut best = f64::NEG_INFINITY;
            for code in 0..(1usize << s_count) {
                let table: Vec<f64> = (0..s_count)
                    .flat_map(|s| if (code >> s) & 1 == 0 { [1.0, 0.0] } else { [0.0, 1.0] })
                    .collect();
                best = best.max(agent_value(game, &pi.with_agent(i, table)?, i)?);
            }
            worst = worst.max((best_response(game, &pi, i)?.value - best).abs());
        }
    }
    outcome(worst <= 1e-8, format!("max |BR - enumeration| = {worst:.3e} over 20 games"))
}

fn c2_mpg_identity() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0_f64;
    for _ in 0..10 {
        let spec = TestGameSpec {
            common_payoff: true,
            ..random_spec(&mut rng, 3, &[2, 3])
        };
        let map = make_test_game(&spec)?;
        let game = map.base();
        let pi = random_interior_policy(&mut rng, game.n_states(), game.actions());
        for _ in 0..100 {
            let i = rng.random_range(0..2);
            let dev = random_interior_policy(&mut rng, game.n_states(), game.actions());
            let err = verify_mpg_identity(game, common_value_potential, &pi, i, dev.table(i))?;
            worst = worst.max(err);
        }
    }
    outcome(worst <= 1e-8, format!("max |dPhi - dV_i| = {worst:.3e} over 1000 deviations"))
}

fn c3_value_bound() -> Result<Outcome> {
    let map = make_congestion(CongestionParams::default())?;
    let sens = estimate_sensitivity(&map, 50, 303)?;
    let report = value_bound_sweep(&map, 50, &sens, SENSITIVITY_INFLATION, 304)?;
    outcome(
        report.violations == 0,
        format!(
            "{} violations in {} checks; omega_hat = ({:.4}, {:.4}), delta = {:.2}, max ratio {:.3e}",
            report.violations, report.checks, sens.omega_r, sens.omega_p, report.delta, report.max_ratio
        ),
    )
}

fn c4_stable_implies_nash() -> Result<Outcome> {
    let map = coordination_bandit(0.05)?;
    let sens = estimate_sensitivity(&map, 50, 404)?;
    let epsilon = 0.05;
    let report = stable_implies_nash_sweep(&map, 0.05, epsilon, &sens, SENSITIVITY_INFLATION)?;
    outcome(
        report.violations == 0 && report.candidates > 0,
        format!(
            "{} grid {epsilon}-PSE candidates, {} violations, max excess {:.3e}, delta = {:.4}",
            report.candidates, report.violations, report.max_excess, report.delta
        ),
    )
}

fn c5_potential_improvement() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst_drop = 0.0_f64;
    let mut total_gain = 0.0;
    for _ in 0..5 {
        let spec = TestGameSpec {
            common_payoff: true,
            ..TestGameSpec::random(3, &[2, 3], 0.8, rng.random())
        };
        let map = make_test_game(&spec)?;
        let eta = theory_step_size(map.base(), f64::INFINITY);
        let history = run(&map, &AlgoConfig::exact(Algorithm::IpgaD, eta, 500))?;
        let values: Vec<f64> = history.rounds.iter().map(|r| r.values[0]).collect();
        for w in values.windows(2) {
            worst_drop = worst_drop.max(w[0] - w[1]);
        }
        total_gain += values[values.len() - 1] - values[0];
    }
    outcome(
        worst_drop <= 1e-10,
        format!("largest one-round drop {worst_drop:.3e}; summed gain {total_gain:.3e} over 5 games"),
    )
}

fn c6_inpg_normalizer() -> Result<Outcome> {
    let map = make_congestion(CongestionParams::default())?;
    let history = run(&map, &AlgoConfig::exact(Algorithm::Inpg, 1e-4, 10_000))?;
    let min_z = history
        .rounds
        .iter()
        .filter_map(|r| r.min_normalizer)
        .fold(f64::INFINITY, f64::min);
    outcome(
        history.len() == 10_000 && min_z >= 1.0 - 1e-12,
        format!("min Z_i(s) = {min_z:.15} over {} rounds", history.len()),
    )
}

fn first_round_below(h: &RunHistory, threshold: f64) -> Option<usize> {
    h.rounds.iter().find(|r| r.pse_gap <= threshold).map(|r| r.t)
}

fn c7_best_iterate() -> Result<Outcome> {
    let map = make_congestion(CongestionParams::default())?;
    let mut pass = true;
    let mut parts = Vec::new();
    let mut histories = Vec::new();
    for alg in [Algorithm::IpgaD, Algorithm::Inpg, Algorithm::InpgReg] {
        let mut cfg = AlgoConfig::exact(alg, 1e-4, 10_000);
        if alg == Algorithm::InpgReg {
            cfg.lambda_reg = Some(DEFAULT_LAMBDA_REG);
        }
        let h = run(&map, &cfg)?;
        let g100 = h.rounds[99].pse_gap;
        let (_, best) = h.best_iterate().expect("nonempty");
        let ok = best <= 0.2 * g100;
        pass &= ok;
        parts.push(format!("{}: gap(100) {g100:.3e}, best {best:.3e}", alg.name()));
        histories.push(h);
    }
    let threshold = 0.2 * histories[0].rounds[99].pse_gap;
    let ipga = first_round_below(&histories[0], threshold);
    let inpg = first_round_below(&histories[1], threshold);
    let faster = matches!((inpg, ipga), (Some(a), Some(b)) if a <= b);
    pass &= faster;
    parts.push(format!("threshold {threshold:.3e} reached at IPGA_D {ipga:?}, INPG {inpg:?}"));
    outcome(pass, parts.join("; "))
}

fn c8_estimator() -> Result<Outcome> {
    let map = make_congestion(CongestionParams::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let pi = random_interior_policy(&mut rng, 5, &[2; 4]);
    let game = map.deploy(&pi)?;
    let exact = policy_evaluation(&game, &pi, DEFAULT_SOLVE_TOL)?.qbar;
    let k = 10_000;

    let batch = sample_batch(&game, &pi, k, 809)?;
    let mut cells = vec![vec![Vec::new(); 10]; 4];
    for ep in &batch.episodes {
        for (i, a) in ep.agents.iter().enumerate() {
            cells[i][a.anchor_state * 2 + a.anchor_action].push(a.ret);
        }
    }
    let (mut tested, mut outside, mut worst_z) = (0, 0, 0.0_f64);
    for (i, agent) in cells.iter().enumerate() {
        for (c, xs) in agent.iter().enumerate() {
            if xs.len() < 30 {
                continue;
            }
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            let z = (mean - exact[i][c]).abs() / (sd / n.sqrt());
            tested += 1;
            outside += usize::from(z > 3.0);
            worst_z = worst_z.max(z);
        }
    }

    let mse = |episodes: usize, stream: u64| -> Result<f64> {
        let b = sample_batch(&game, &pi, episodes, stream)?;
        let est = estimate_qbar(&b, &game)?;
        let (sum, count) = est
            .iter()
            .flatten()
            .zip(exact.iter().flatten())
            .fold((0.0, 0), |(s, c), (a, b)| (s + (a - b).powi(2), c + 1));
        Ok(sum / count as f64)
    };
    let reps = 4;
    let (mut small, mut large) = (0.0, 0.0);
    for r in 0..reps {
        small += mse(k, 900 + r)?;
        large += mse(4 * k, 950 + r)?;
    }
    let ratio = small / large;
    outcome(
        outside == 0 && (2.5..=6.0).contains(&ratio),
        format!(
            "{outside}/{tested} cells outside 3 sigma (max z {worst_z:.2}); MSE(K)/MSE(4K) = {ratio:.3} over {reps} repeats"
        ),
    )
}

fn c9_gradient_checks() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let (mut worst_pg, mut worst_occ) = (0.0_f64, 0.0_f64);
    for _ in 0..10 {
        let spec = TestGameSpec {
            common_payoff: true,
            agent_independent: true,
            ..random_spec(&mut rng, 3, &[2, 3])
        };
        let map = make_test_game(&spec)?;
        let game = map.base();
        let pi = random_interior_policy(&mut rng, game.n_states(), game.actions());
        for i in 0..game.n_agents() {
            let scale = policy_gradient(game, &pi, i)?.iter().fold(1.0_f64, |m, g| m.max(g.abs()));
            worst_pg = worst_pg.max(finite_diff_check(game, &pi, i, 1e-5)? / scale);
            worst_occ = worst_occ.max(occupancy_gradient_check(game, &pi, i, 1e-5)?);
        }
    }
    outcome(
        worst_pg <= 1e-5 && worst_occ <= 1e-5,
        format!("policy-gradient rel. error {worst_pg:.3e}, occupancy-gradient rel. error {worst_occ:.3e}"),
    )
}

fn c10_repeated_optimization() -> Result<Outcome> {
    let spec = TestGameSpec {
        agent_independent: true,
        shift: Some(LinearShift {
            omega_r: 0.05,
            omega_p: 0.05,
        }),
        ..TestGameSpec::random(3, &[2, 2], 0.8, 1010)
    };
    let map = make_test_game(&spec)?;
    let (history, report) = run_repeated(&map, 20.0, 50, 1e-7)?;
    let residuals: Vec<f64> = history.rounds.iter().filter_map(|r| r.step_residual).collect();
    let worst_ratio = residuals
        .windows(2)
        .map(|w| w[1] / w[0])
        .fold(0.0_f64, f64::max);
    let converged = report.final_residual <= 1e-6 && report.rounds <= 50;
    let bounded = report.final_pse_gap <= report.gap_bound + 1e-6;
    outcome(
        worst_ratio < 1.0 && converged && bounded,
        format!(
            "max contraction ratio {worst_ratio:.3}, residual {:.3e} after {} rounds, gap {:.3e} <= bound {:.3e}",
            report.final_residual, report.rounds, report.final_pse_gap, report.gap_bound
        ),
    )
}

fn c11_environment_fidelity() -> Result<Outcome> {
    let params = SafeDistancingParams::default();
    let base = safe_distancing_base(&params)?;
    let joint = base.joint();
    let weights = [4.0, 3.0, 2.0, 1.0];
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let acts: Vec<usize> = (0..8).map(|_| rng.random_range(0..4)).collect();
        let j = joint.encode(&acts);
        let mut counts = [0usize; 4];
        acts.iter().for_each(|&a| counts[a] += 1);
        let max_count = *counts.iter().max().unwrap();
        for (i, &a) in acts.iter().enumerate() {
            let r = weights[a] * counts[a] as f64;
            mismatches += usize::from(base.reward(i, SAFE, j) != r);
            mismatches += usize::from(base.reward(i, DISTANCING, j) != r - 100.0);
        }
        let to_distancing = if max_count > 4 { 1.0 } else { 0.0 };
        let back_to_safe = if max_count <= 2 { 1.0 } else { 0.0 };
        mismatches += usize::from(base.transition(SAFE, j)[DISTANCING] != to_distancing);
        mismatches += usize::from(base.transition(DISTANCING, j)[SAFE] != back_to_safe);
    }

    let congestion = make_congestion(CongestionParams::default())?;
    let cg = congestion.base();
    let cj = cg.joint();
    for j in 0..cj.len() {
        let acts = cj.decode(j);
        for (i, &a) in acts.iter().enumerate() {
            let shared = acts.iter().filter(|&&b| b == a).count();
            for s in 0..5 {
                mismatches += usize::from(cg.reward(i, s, j) != CONGESTION_SCHEDULE[shared - 1]);
            }
        }
    }
    let deployed = congestion.deploy(&JointPolicy::uniform_for(cg))?;
    let byte_exact = deployed.to_json()? == cg.to_json()?;
    let sd_map = make_safe_distancing(params)?;
    let sd_deployed = sd_map.deploy(&JointPolicy::uniform_for(sd_map.base()))?;
    outcome(
        mismatches == 0 && byte_exact && sd_deployed.validate().is_ok(),
        format!("{mismatches} rule mismatches; congestion respond(pi_0) byte-exact: {byte_exact}"),
    )
}

fn strip_timing(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

fn c12_determinism() -> Result<Outcome> {
    let configs = [
        r#"{"env": "congestion", "alg": {"algorithm": "IPGA_D", "T": 150}, "seeds": [0, 1]}"#,
        r#"{"env": "congestion", "alg": {"algorithm": "INPG", "T": 150, "K": 10}, "seeds": [5]}"#,
        r#"{"env": "safe-distancing", "alg": {"algorithm": "INPG_REG", "lambda_reg": 0.003, "T": 5, "K": 5}, "seeds": [2]}"#,
    ];
    let mut compared = 0;
    let mut differing = Vec::new();
    for text in configs {
        let mut outputs = Vec::new();
        for _ in 0..2 {
            let dir = tempfile::tempdir()?;
            let mut cfg = ExperimentConfig::parse_str(text, &[])?;
            cfg.output_dir = dir.path().to_path_buf();
            run_experiment(&cfg)?;
            let files: Vec<String> = cfg
                .seeds
                .iter()
                .map(|s| std::fs::read_to_string(dir.path().join(format!("seed_{s}.csv"))))
                .collect::<std::io::Result<_>>()?;
            outputs.push(files);
        }
        for (a, b) in outputs[0].iter().zip(&outputs[1]) {
            compared += 1;
            if strip_timing(a) != strip_timing(b) {
                differing.push(text.to_string());
            }
        }
    }
    outcome(
        differing.is_empty(),
        format!("{compared} per-seed CSV pairs compared, {} differ", differing.len()),
    )
}

fn main() {
    let criteria: [(&str, Check, u64); 12] = [
        ("best-response oracle equivalence", c1_best_response_oracle, 10),
        ("potential identity", c2_mpg_identity, 10),
        ("cross-game value bound (congestion)", c3_value_bound, 60),
        ("stable implies Nash (coordination grid)", c4_stable_implies_nash, 120),
        ("potential improvement under IPGA-D", c5_potential_improvement, 30),
        ("INPG normalizer >= 1", c6_inpg_normalizer, 300),
        ("best-iterate convergence (congestion)", c7_best_iterate, 900),
        ("estimator unbiasedness and MSE rate", c8_estimator, 60),
        ("gradient checks", c9_gradient_checks, 30),
        ("repeated occupancy optimization", c10_repeated_optimization, 60),
        ("environment fidelity", c11_environment_fidelity, 10),
        ("determinism", c12_determinism, 60),
    ];
    let mut failed = 0;
    for (k, (name, check, budget)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let in_time = elapsed <= Duration::from_secs(*budget);
        let (pass, detail) = match result {
            Ok(o) => (o.pass && in_time, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!(
            "criterion {:>2} {} {name} [{:.1}s / {budget}s]: {detail}",
            k + 1,
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

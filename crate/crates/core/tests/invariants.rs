use perfmpg_core::environments::{make_congestion, make_test_game, CongestionParams, LinearShift, TestGameSpec};
use perfmpg_core::equilibrium::{best_response, pse_gap};
use perfmpg_core::game::{policy_evaluation, DEFAULT_SOLVE_TOL};
use perfmpg_core::learners::{inpg_step, ipga_step, simplex_project, Gradients, IpgaVariant};
use perfmpg_core::verify::random_interior_policy;
use perfmpg_core::{JointPolicy, TabularGame};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spec_strategy() -> impl Strategy<Value = TestGameSpec> {
    (
        1usize..=3,
        prop::collection::vec(1usize..=3, 1..=2),
        0.0f64..0.95,
        any::<bool>(),
        any::<bool>(),
        prop::option::of((0.0f64..0.5, 0.0f64..0.5)),
        any::<u64>(),
    )
        .prop_map(|(s, actions, gamma, common, indep, shift, seed)| TestGameSpec {
            n_states: s,
            actions,
            gamma,
            common_payoff: common,
            agent_independent: indep,
            shift: shift.map(|(r, p)| LinearShift { omega_r: r, omega_p: p }),
            seed,
        })
}

fn is_policy(p: &JointPolicy) -> bool {
    (0..p.n_agents()).all(|i| {
        (0..p.n_states()).all(|s| {
            let row = p.row(i, s);
            row.iter().all(|&x| (0.0..=1.0).contains(&x)) && (row.iter().sum::<f64>() - 1.0).abs() < 1e-12
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_lands_on_simplex_and_is_idempotent(v in prop::collection::vec(-5.0f64..5.0, 1..8)) {
        let p = simplex_project(&v).unwrap();
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let q = simplex_project(&p).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn deployments_are_valid_games(spec in spec_strategy(), seed in any::<u64>()) {
        let map = make_test_game(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pi = random_interior_policy(&mut rng, spec.n_states, &spec.actions);
        let g = map.deploy(&pi).unwrap();
        prop_assert!(g.validate().is_ok());
        prop_assert!(g.same_shape(map.base()));
    }

    #[test]
    fn best_response_dominates_current_policy(spec in spec_strategy(), seed in any::<u64>()) {
        let map = make_test_game(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pi = random_interior_policy(&mut rng, spec.n_states, &spec.actions);
        let game = map.deploy(&pi).unwrap();
        let eval = policy_evaluation(&game, &pi, DEFAULT_SOLVE_TOL).unwrap();
        for i in 0..game.n_agents() {
            let br = best_response(&game, &pi, i).unwrap();
            prop_assert!(br.value >= eval.value_at(i, game.rho()) - 1e-9);
        }
        prop_assert!(pse_gap(&map, &pi).unwrap().max_gap >= -1e-9);
    }

    #[test]
    fn learner_steps_emit_policies(spec in spec_strategy(), seed in any::<u64>(), eta in 1e-4f64..1.0) {
        let map = make_test_game(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pi = random_interior_policy(&mut rng, spec.n_states, &spec.actions);
        let game = map.deploy(&pi).unwrap();
        let grads = Gradients::from_eval(&policy_evaluation(&game, &pi, DEFAULT_SOLVE_TOL).unwrap());
        for variant in [IpgaVariant::L, IpgaVariant::D] {
            prop_assert!(is_policy(&ipga_step(&pi, &grads, eta, variant).unwrap()));
        }
        let npg = inpg_step(&pi, &grads, eta, game.gamma()).unwrap();
        prop_assert!(is_policy(&npg.policy));
        prop_assert!(npg.policy.min_entry() > 0.0);
    }

    #[test]
    fn game_json_round_trips_bit_exactly(spec in spec_strategy()) {
        let map = make_test_game(&spec).unwrap();
        let text = map.base().to_json().unwrap();
        let back = TabularGame::from_json(&text).unwrap();
        prop_assert_eq!(&back, map.base());
        prop_assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn bellman_residual_is_small(spec in spec_strategy(), seed in any::<u64>()) {
        let map = make_test_game(&spec).unwrap();
        let game = map.base();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pi = random_interior_policy(&mut rng, spec.n_states, &spec.actions);
        let eval = policy_evaluation(game, &pi, DEFAULT_SOLVE_TOL).unwrap();
        for i in 0..game.n_agents() {
            for s in 0..game.n_states() {
                let probs = pi.joint_probs(s);
                let backup: f64 = probs.iter().enumerate().map(|(j, p)| {
                    let next: f64 = game.transition(s, j).iter().zip(&eval.values[i]).map(|(q, v)| q * v).sum();
                    p * (game.reward(i, s, j) + game.gamma() * next)
                }).sum();
                prop_assert!((backup - eval.values[i][s]).abs() <= 1e-8 * (1.0 + backup.abs()));
            }
        }
    }
}

#[test]
fn congestion_deployments_stay_valid() {
    let map = make_congestion(CongestionParams {
        omega_r: 0.1,
        omega_p: 0.1,
        gamma: 0.99,
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let pi = random_interior_policy(&mut rng, 5, &[2; 4]);
        assert!(map.deploy(&pi).unwrap().validate().is_ok());
    }
}

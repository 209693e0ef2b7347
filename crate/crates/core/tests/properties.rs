use proptest::prelude::*;

use tsfl_core::envy::{solve_envy, Side};
use tsfl_core::generators::{random_envy_instance, random_instance, CurveFamily, EnvySpec, RandomSpec};
use tsfl_core::io;
use tsfl_core::lp::{build_base_lp, solve_lp, LP_TOL};
use tsfl_core::oracle::exact_integer_opt;
use tsfl_core::queueing::{stationary, QueueParams};
use tsfl_core::rounding::{consolidate_prices, verify_feasibility};
use tsfl_core::{solve, MicroLpBackend, Objective, SolverConfig};

fn family() -> impl Strategy<Value = CurveFamily> {
    prop_oneof![Just(CurveFamily::Uniform), Just(CurveFamily::Exponential), Just(CurveFamily::Mixed)]
}

fn objective() -> impl Strategy<Value = Objective> {
    prop_oneof![Just(Objective::Surplus), Just(Objective::Profit), Just(Objective::Throughput)]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn instance_text_round_trips(seed in 0u64..1000, n in 1usize..7, fam in family()) {
        let inst = random_instance(&RandomSpec { n, seed, family: fam, grid_size: 5, ..RandomSpec::default() }).unwrap();
        let text = io::instance_to_string(&inst);
        let back = io::parse_instance(&text).unwrap();
        prop_assert_eq!(io::instance_to_string(&back), text);
    }

    #[test]
    fn envy_text_round_trips(seed in 0u64..1000, n in 2usize..5) {
        let inst = random_envy_instance(&EnvySpec { n, seed, ..EnvySpec::default() }).unwrap();
        let text = io::envy_instance_to_string(&inst);
        prop_assert_eq!(io::envy_instance_to_string(&io::parse_envy_instance(&text).unwrap()), text);
    }

    #[test]
    fn queue_distribution_is_normalised(lambda in 0.1f64..20.0, ratio in 0.5f64..2.0, kappa in 0.1f64..3.0, gamma in 0.1f64..3.0) {
        let params = QueueParams::new(lambda, lambda * ratio, kappa, gamma, 0.1).unwrap();
        let st = stationary(&params, 1e-12).unwrap();
        prop_assert!((st.total_mass() - 1.0).abs() < 1e-9);
        prop_assert!(st.detailed_balance_residual() < 1e-9);
        let a = st.abandonment_probability();
        prop_assert!((0.0..=1.0).contains(&a));
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 10, ..ProptestConfig::default() })]

    #[test]
    fn consolidation_never_lowers_the_objective(seed in 0u64..1000, n in 2usize..6, fam in family(), obj in objective()) {
        let inst = random_instance(&RandomSpec { n, seed, family: fam, grid_size: 5, ..RandomSpec::default() }).unwrap();
        let model = build_base_lp(&inst, obj).unwrap();
        if let Some(sol) = solve_lp(&model, &MicroLpBackend, LP_TOL).unwrap() {
            let cons = consolidate_prices(&sol, &inst).unwrap();
            let tol = 1e-7 * sol.objective_value().abs().max(1.0);
            prop_assert!(cons.objective_value() >= sol.objective_value() - tol);
            prop_assert!(cons.max_local_violation(inst.flow_lower_bound, false) <= 1e-6);
        }
    }

    #[test]
    fn solver_output_is_feasible_and_certified(seed in 0u64..1000, n in 2usize..5, fam in family()) {
        let inst = random_instance(&RandomSpec { n, seed, family: fam, grid_size: 5, ..RandomSpec::default() }).unwrap();
        let config = SolverConfig { jobs: 1, ..SolverConfig::default() };
        let (sol, report) = solve(&inst, &config).unwrap();
        prop_assert!(verify_feasibility(&inst, &sol, 4.0).passed());
        prop_assert!(report.verification.passed());
        let opt = exact_integer_opt(&inst, Objective::Surplus, 1 << 12).unwrap();
        let tol = 1e-7 * opt.objective_value().abs().max(1.0);
        prop_assert!(report.certified_lower_bound <= opt.objective_value() + tol);
    }

    #[test]
    fn envy_ladders_are_monotone(seed in 0u64..1000, n in 2usize..5, draw_seed in any::<u64>()) {
        let inst = random_envy_instance(&EnvySpec { n, seed, ..EnvySpec::default() }).unwrap();
        let run = solve_envy(&inst, &MicroLpBackend).unwrap();
        prop_assert!(run.check.passed(), "{}", run.check);
        let policy = &run.rounding.policy;
        for node in 0..policy.nodes.len() {
            for side in [Side::Buyer, Side::Seller] {
                for t in 0..8 {
                    let ladder = policy.sample_ladder(node, side, draw_seed, t);
                    prop_assert_eq!(policy.ladder_violations(node, side, &ladder), 0);
                }
            }
        }
    }
}

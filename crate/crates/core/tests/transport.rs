mod common;

use common::{brute_force_transport, half_unit_supplies, random_ensemble, random_weights};
use hetpf::transport::{solve_transport, solve_transport_1d, validate_plan, CostMatrix};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn instance(seed: u64, m: usize, dim: usize) -> (CostMatrix<f64>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = random_ensemble(&mut rng, dim, m, 1.0);
    (CostMatrix::squared_euclidean(&e), random_weights(&mut rng, m))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn plan_is_feasible(seed in any::<u64>(), m in 2usize..12, dim in 1usize..4) {
        let (cost, w) = instance(seed, m, dim);
        let plan = solve_transport(&cost, &w).unwrap();
        let diag = validate_plan(&plan, &w);
        prop_assert!(diag.passed, "{diag:?}");
    }

    #[test]
    fn duals_certify_optimality(seed in any::<u64>(), m in 2usize..12, dim in 1usize..4) {
        let (cost, w) = instance(seed, m, dim);
        let plan = solve_transport(&cost, &w).unwrap();
        let duals = plan.duals().expect("network simplex returns duals");
        let c = cost.matrix();
        let t = plan.matrix();
        let mut dual_objective = 0.0;
        for i in 0..m {
            dual_objective += duals.row[i] * w[i] * m as f64;
            for j in 0..m {
                let reduced = c[(i, j)] - duals.row[i] - duals.col[j];
                prop_assert!(reduced >= -1e-8, "reduced cost {reduced} at ({i}, {j})");
                if t[(i, j)] > 1e-12 {
                    prop_assert!(reduced.abs() <= 1e-8, "support slack {reduced} at ({i}, {j})");
                }
            }
        }
        dual_objective += duals.col.sum();
        prop_assert!((dual_objective - plan.objective()).abs() <= 1e-8 * (1.0 + plan.objective()));
    }

    #[test]
    fn matches_integer_enumeration(seed in any::<u64>(), m in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = random_ensemble(&mut rng, 2, m, 1.0);
        let supply = half_unit_supplies(&mut rng, m);
        let w = DVector::from_iterator(m, supply.iter().map(|&k| k as f64 / (2 * m) as f64));
        let cost = CostMatrix::squared_euclidean(&e);
        let plan = solve_transport(&cost, &w).unwrap();
        let oracle = brute_force_transport(cost.matrix(), &supply);
        prop_assert!((plan.objective() - oracle).abs() <= 1e-9, "{} vs {oracle}", plan.objective());
    }

    #[test]
    fn scalar_solvers_agree(seed in any::<u64>(), m in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = random_ensemble(&mut rng, 1, m, 2.0);
        let states: Vec<f64> = e.matrix().iter().copied().collect();
        let w = random_weights(&mut rng, m);
        let a = solve_transport(&CostMatrix::from_scalars(&states), &w).unwrap();
        let b = solve_transport_1d(&states, &w).unwrap();
        prop_assert!((a.objective() - b.objective()).abs() <= 1e-9);
        prop_assert!(validate_plan(&b, &w).passed);
    }

    #[test]
    fn uniform_weights_give_identity_cost(seed in any::<u64>(), m in 2usize..10) {
        let (cost, _) = instance(seed, m, 2);
        let w = DVector::from_element(m, 1.0 / m as f64);
        let plan = solve_transport(&cost, &w).unwrap();
        prop_assert!(plan.objective().abs() <= 1e-12);
    }
}

#[test]
fn degenerate_duplicate_members() {
    // identical states make many plans optimal; the solver must still terminate
    let e = DMatrix::from_row_slice(1, 6, &[0.0f64, 0.0, 1.0, 1.0, 1.0, 2.0]);
    let cost = CostMatrix::squared_euclidean(&hetpf::Ensemble::new(e).unwrap());
    let w = DVector::from_vec(vec![0.0, 0.5, 0.0, 0.25, 0.25, 0.0]);
    let plan = solve_transport(&cost, &w).unwrap();
    assert!(validate_plan(&plan, &w).passed);
    let states = [0.0f64, 0.0, 1.0, 1.0, 1.0, 2.0];
    let sorted = solve_transport_1d(&states, &w).unwrap();
    assert!((plan.objective() - sorted.objective()).abs() <= 1e-12);
}

#[test]
fn f32_plans_are_feasible() {
    let states: Vec<f32> = vec![0.3, -1.2, 2.0, 0.7];
    let w = DVector::from_vec(vec![0.1f32, 0.2, 0.3, 0.4]);
    let plan = solve_transport(&CostMatrix::from_scalars(&states), &w).unwrap();
    let sorted = solve_transport_1d(&states, &w).unwrap();
    assert!((plan.objective() - sorted.objective()).abs() <= 1e-4);
}

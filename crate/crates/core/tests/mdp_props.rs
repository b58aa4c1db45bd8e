use approx::assert_abs_diff_eq;
use fedq_core::mdp::{bellman_apply, linf_error, optimal_q, QTable, TabularMdp};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn normalize(raw: Vec<f64>, width: usize) -> Vec<f64> {
    raw.chunks(width)
        .flat_map(|row| {
            let total: f64 = row.iter().sum();
            row.iter().map(move |x| x / total).collect::<Vec<_>>()
        })
        .collect()
}

fn mdp_strategy() -> impl Strategy<Value = TabularMdp> {
    (1usize..5, 1usize..4, 0.0f64..0.95).prop_flat_map(|(s, a, gamma)| {
        (
            proptest::collection::vec(0.01f64..1.0, s * a * s),
            proptest::collection::vec(0.0f64..=1.0, s * a),
        )
            .prop_map(move |(k, r)| TabularMdp::new(s, a, normalize(k, s), r, gamma).unwrap())
    })
}

proptest! {
    #[test]
    fn bellman_operator_is_a_contraction(
        mdp in mdp_strategy(),
        seed_a in proptest::collection::vec(0.0f64..20.0, 48),
        seed_b in proptest::collection::vec(0.0f64..20.0, 48),
    ) {
        let n = mdp.num_pairs();
        let q1 = QTable::from_vec(mdp.num_states(), mdp.num_actions(), seed_a[..n].to_vec()).unwrap();
        let q2 = QTable::from_vec(mdp.num_states(), mdp.num_actions(), seed_b[..n].to_vec()).unwrap();
        let before = linf_error(&q1, &q2);
        let after = linf_error(&bellman_apply(&mdp, &q1), &bellman_apply(&mdp, &q2));
        prop_assert!(after <= mdp.discount() * before + 1e-12);
    }

    #[test]
    fn optimal_q_matches_linear_solve_for_single_action(
        s in 1usize..6,
        gamma in 0.0f64..0.99,
        raw in proptest::collection::vec(0.01f64..1.0, 36),
        reward in proptest::collection::vec(0.0f64..=1.0, 6),
    ) {
        let kernel = normalize(raw[..s * s].to_vec(), s);
        let mdp = TabularMdp::new(s, 1, kernel.clone(), reward[..s].to_vec(), gamma).unwrap();
        let q = optimal_q(&mdp, 1e-10, 10_000_000).unwrap();
        let p = DMatrix::from_row_slice(s, s, &kernel);
        let system = DMatrix::<f64>::identity(s, s) - p * gamma;
        let exact = system.lu().solve(&DVector::from_column_slice(&reward[..s])).unwrap();
        for (got, want) in q.values().iter().zip(exact.iter()) {
            prop_assert!((got - want).abs() <= 1e-9, "{got} vs {want}");
        }
    }
}

#[test]
fn two_state_global_example() {
    let mdp = TabularMdp::new(2, 1, vec![0.5, 0.5, 0.5, 0.5], vec![1.0, 0.0], 0.5).unwrap();
    let q = optimal_q(&mdp, 1e-12, 100_000).unwrap();
    assert_abs_diff_eq!(q.values()[0], 1.5, epsilon = 1e-11);
    assert_abs_diff_eq!(q.values()[1], 0.5, epsilon = 1e-11);
}

#[test]
fn optimal_q_is_a_fixed_point() {
    let kernel = normalize((1..=2 * 3 * 2).map(|x| x as f64).collect(), 2);
    let mdp = TabularMdp::new(2, 3, kernel, vec![0.1, 0.9, 0.4, 0.0, 1.0, 0.3], 0.9).unwrap();
    let q = optimal_q(&mdp, 1e-10, 1_000_000).unwrap();
    assert!(linf_error(&bellman_apply(&mdp, &q), &q) <= 1e-10);
    assert!(q.values().iter().all(|&v| (0.0..=10.0).contains(&v)));
}

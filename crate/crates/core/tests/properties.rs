use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use sparse_iot::cli::{LogSpec, RunConfig};
use sparse_iot::eot::{bilevel_gap, sinkhorn, CostBasis, CostVector, SinkhornOptions};
use sparse_iot::graph::{
    certificate_profile, gen_circular, gen_erdos_renyi, geodesic_distances, graph_model, log_grid,
    run_sparsistency_trial, shifted_laplacian_cost, TrialOptions, UNREACHABLE,
};
use sparse_iot::linalg::{max_eigenvalue, min_eigenvalue};
use sparse_iot::population::{solve_on_model, PopulationConfig};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn shifted_laplacian_is_spd_with_floor(n in 3usize..12, p in 0.1f64..0.9, seed in 0u64..1000, frac in 0.01f64..1.0) {
        let g = gen_erdos_renyi(n, p, seed).unwrap();
        prop_assume!(g.edge_count() > 0);
        let a = shifted_laplacian_cost(&g, frac, None).unwrap();
        let lap = shifted_laplacian_cost(&g, 1.0, Some(1e-300)).unwrap();
        let delta = frac * max_eigenvalue(&lap);
        prop_assert!(min_eigenvalue(&a) >= delta * (1.0 - 1e-9));
        prop_assert!((&a - a.transpose()).amax() == 0.0);
    }

    #[test]
    fn geodesics_form_a_metric(n in 3usize..12, p in 0.0f64..0.8, seed in 0u64..1000) {
        let g = gen_erdos_renyi(n, p, seed).unwrap();
        let d = geodesic_distances(&g);
        for i in 0..n {
            prop_assert_eq!(d[i][i], 0);
            for j in 0..n {
                prop_assert_eq!(d[i][j], d[j][i]);
                prop_assert_eq!(d[i][j] == 1, g.has_edge(i, j));
                for k in 0..n {
                    if d[i][k] != UNREACHABLE && d[k][j] != UNREACHABLE {
                        prop_assert!(d[i][j] <= d[i][k] + d[k][j]);
                    }
                }
            }
        }
    }

    #[test]
    fn profile_is_sign_on_support(n in 3usize..9, eps in 0.1f64..10.0, directed in any::<bool>()) {
        let g = gen_circular(n).unwrap();
        let prof = certificate_profile(&g, &[eps], directed).unwrap();
        prop_assert_eq!(prof.rows.len(), n * n);
        for r in prof.rows.iter().filter(|r| r.on_support) {
            let want = if r.i == r.j { 1.0 } else { -1.0 };
            prop_assert!((r.z - want).abs() <= 1e-8, "z[{},{}] = {}", r.i, r.j, r.z);
        }
    }

    #[test]
    fn log_grid_shape(start in 1e-4f64..1e4, stop in 1e-4f64..1e4, count in 1usize..40) {
        let v = log_grid(start, stop, count).unwrap();
        prop_assert!(v.windows(2).all(|w| w[0] > w[1]));
        prop_assert!(!v.is_empty() && v.len() <= count);
        let (hi, lo) = (start.max(stop), start.min(stop));
        let first = if count == 1 { start } else { hi };
        prop_assert!((v[0] - first).abs() <= 1e-12 * hi);
        if count > 1 {
            prop_assert!((v[v.len() - 1] - lo).abs() <= 1e-12 * hi);
        }
    }

    #[test]
    fn sinkhorn_meets_marginals(n in 2usize..7, m in 2usize..7, seed in 0u64..1000, eps in 0.2f64..5.0) {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let cost = DMatrix::from_fn(n, m, |_, _| 2.0 * next() - 1.0);
        let mut a = DVector::from_fn(n, |_, _| 0.1 + next());
        let mut b = DVector::from_fn(m, |_, _| 0.1 + next());
        a /= a.sum();
        b /= b.sum();
        let sol = sinkhorn(&cost, &a, &b, eps, &SinkhornOptions::default()).unwrap();
        let rows = DVector::from_iterator(n, sol.coupling.row_iter().map(|r| r.sum()));
        let cols = DVector::from_iterator(m, sol.coupling.column_iter().map(|c| c.sum()));
        prop_assert!((rows - &a).abs().sum() <= 1e-8);
        prop_assert!((cols - &b).abs().sum() <= 1e-8);
        prop_assert!(sol.coupling.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn bilevel_gap_does_not_depend_on_a(vals in prop::collection::vec(-2.0f64..2.0, 4)) {
        let x = DMatrix::from_fn(12, 2, |i, j| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.5);
        let y = DMatrix::from_fn(12, 2, |i, j| ((i * 5 + j * 2) % 13) as f64 / 13.0 - 0.5);
        let basis = CostBasis::bilinear(x, y).unwrap();
        let at_zero = bilevel_gap(&CostVector::zeros(4), &basis, 1.0).unwrap();
        let at_a = bilevel_gap(&CostVector::new(vals), &basis, 1.0).unwrap();
        prop_assert!((at_zero - at_a).abs() <= 1e-7);
    }

    #[test]
    fn log_spec_round_trips(start in 1e-12f64..1e12, stop in 1e-12f64..1e12, count in 1usize..1000) {
        let g = LogSpec { start, stop, count };
        prop_assert_eq!(g.to_string().parse::<LogSpec>().unwrap(), g);
    }

    #[test]
    fn run_config_round_trips(
        cmd in prop::sample::select(vec!["certificate", "solve", "sparsistency", "complexity", "limits"]),
        n in 1usize..100,
        eps in prop::collection::vec(1e-6f64..1e6, 1..5),
        seeds in prop::collection::vec(any::<u64>(), 1..5),
        lambda in prop::option::of(0.0f64..1e3),
        rel in 0.0f64..10.0,
        directed in any::<bool>(),
    ) {
        let mut c = RunConfig::for_command(cmd);
        c.n = n;
        c.eps = eps;
        c.seeds = seeds;
        c.lambda = lambda;
        c.lambda_rel = rel;
        c.directed = directed;
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        prop_assert_eq!(back, c);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn trials_are_deterministic(seed in 0u64..1000, eps in 0.5f64..5.0) {
        let g = gen_circular(4).unwrap();
        let lambdas = [0.1, 0.01];
        let opts = TrialOptions::default();
        let a = run_sparsistency_trial(&g, eps, &lambdas, 80, seed, &opts).unwrap();
        let b = run_sparsistency_trial(&g, eps, &lambdas, 80, seed, &opts).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn population_penalty_above_threshold_is_zero(n in 3usize..6, eps in 0.2f64..5.0, excess in 1.0f64..3.0) {
        let model = graph_model(&gen_circular(n).unwrap(), eps).unwrap();
        let top = sparse_iot::graph::analytic_null_threshold(&model).unwrap();
        let sol = solve_on_model(&model, &PopulationConfig::new(excess * top)).unwrap();
        prop_assert!(sol.a.amax() == 0.0);
    }
}

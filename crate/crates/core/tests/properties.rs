//! Property tests for the invariants of each module.

use std::sync::Arc;

use bspde_core::backward::{
    solve_backward, BrownianTerminal, BspdeProblem, LinearDriver, PicardConfig,
};
use bspde_core::fem::{closed_form_eigenvalue, FemSystem};
use bspde_core::field::{BrownianScaled, PathField};
use bspde_core::forward::{solve_state, LinearSpdeCoeffs};
use bspde_core::lq::{eval_policy, PolicyStack};
use bspde_core::mlp::{central_differences, max_relative_error, MlpNet, Precision};
use bspde_core::rand_paths::{sample_brownian, sample_brownian_range, BrownianBatch, TimeGrid};
use bspde_core::regression::RegressionBasis;
use bspde_core::semigroup::SemigroupEvaluator;
use proptest::prelude::*;

fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, n)
}

fn sized_vec(max_cells: usize) -> impl Strategy<Value = (usize, Vec<f64>)> {
    (2usize..max_cells).prop_flat_map(|c| (Just(c), vec_strategy(c - 1)))
}

fn min_hidden_preactivation(net: &MlpNet, x: &[f64]) -> f64 {
    let layers = net.layers();
    let mut a = x.to_vec();
    let mut min = f64::INFINITY;
    for l in &layers[..layers.len() - 1] {
        let z: Vec<f64> = (0..l.n_out)
            .map(|r| l.b[r] + (0..l.n_in).map(|c| l.w[r * l.n_in + c] * a[c]).sum::<f64>())
            .collect();
        min = z.iter().fold(min, |m, v| m.min(v.abs()));
        a = z.into_iter().map(|v| v.max(0.0)).collect();
    }
    min
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn mass_and_stiffness_are_positive_definite((cells, u) in sized_vec(40)) {
        prop_assume!(u.iter().any(|v| v.abs() > 1e-3));
        let fem = FemSystem::uniform(cells).unwrap();
        prop_assert!(fem.mass_inner(&u, &u) > 0.0);
        prop_assert!(fem.stiffness_inner(&u, &u) > 0.0);
    }

    #[test]
    fn eigenvalues_match_closed_form(cells in 2usize..64) {
        let fem = FemSystem::uniform(cells).unwrap();
        let s = fem.spectral().unwrap();
        let h = fem.mesh().h();
        for (k, &lam) in s.eigenvalues().iter().enumerate() {
            prop_assert!(rel(lam, closed_form_eigenvalue(h, k + 1)) < 1e-10);
        }
    }

    #[test]
    fn laplacian_maps_h1_norm_to_dual_norm((cells, u) in sized_vec(40)) {
        prop_assume!(u.iter().any(|v| v.abs() > 1e-3));
        let fem = FemSystem::uniform(cells).unwrap();
        let lu = fem.apply_discrete_laplacian(&u).unwrap();
        let a = fem.norm(&lu.0, -1).unwrap();
        let b = fem.norm(&u, 1).unwrap();
        prop_assert!(rel(a, b) < 1e-10, "{} vs {}", a, b);
    }

    #[test]
    fn modal_coefficients_satisfy_parseval((cells, u) in sized_vec(40)) {
        prop_assume!(u.iter().any(|v| v.abs() > 1e-3));
        let fem = FemSystem::uniform(cells).unwrap();
        let s = fem.spectral().unwrap();
        let sum: f64 = (0..s.dim())
            .map(|k| s.mass_vector(k).iter().zip(&u).map(|(a, b)| a * b).sum::<f64>().powi(2))
            .sum();
        let n0 = fem.norm(&u, 0).unwrap();
        prop_assert!(rel(n0 * n0, sum) < 1e-12);
    }

    #[test]
    fn enlarging_a_batch_keeps_earlier_paths(seed in any::<u64>(), p in 1usize..20, extra in 1usize..20) {
        let grid = TimeGrid::new(1.0, 7).unwrap();
        let small = sample_brownian(&grid, p, seed, false).unwrap();
        let large = sample_brownian(&grid, p + extra, seed, false).unwrap();
        prop_assert_eq!(small.increments(), &large.increments()[..p * 7]);
        let tail = sample_brownian_range(&grid, p, extra, seed, false).unwrap();
        prop_assert_eq!(tail.increments(), &large.increments()[p * 7..]);
    }

    #[test]
    fn cumulative_sum_is_left_to_right(seed in any::<u64>()) {
        let grid = TimeGrid::new(2.0, 13).unwrap();
        let b = sample_brownian(&grid, 5, seed, false).unwrap();
        for p in 0..5 {
            let mut s = 0.0;
            for &d in b.path_increments(p) {
                s += d;
            }
            prop_assert_eq!(b.w(p, 13).to_bits(), s.to_bits());
        }
    }

    #[test]
    fn semigroup_is_a_contraction((cells, u) in sized_vec(24), t in 0.0f64..2.0) {
        let fem = FemSystem::uniform(cells).unwrap();
        let ev = SemigroupEvaluator::new(&fem).unwrap();
        let e = ev.exp_apply(t, &u).unwrap();
        prop_assert!(fem.norm(&e.0, 0).unwrap() <= fem.norm(&u, 0).unwrap() * (1.0 + 1e-12));
    }

    #[test]
    fn s1h_and_s2h_are_adjoint(cells in 2usize..12, steps in 2usize..10, vals in vec_strategy(2 * 11 * 9)) {
        let fem = FemSystem::uniform(cells).unwrap();
        let ev = SemigroupEvaluator::new(&fem).unwrap();
        let grid = TimeGrid::new(0.5, steps).unwrap();
        let k = steps * fem.dim();
        let v = PathField::from_vec(1, steps, fem.dim(), vals[..k].to_vec()).unwrap();
        let w = PathField::from_vec(1, steps, fem.dim(), vals[k..2 * k].to_vec()).unwrap();
        let (mut lhs, mut rhs) = (0.0, 0.0);
        for j in 0..steps {
            let a = ev.s1h(&grid, &v, j).unwrap();
            let b = ev.s2h(&grid, &w, j).unwrap();
            lhs += grid.tau() * fem.mass_inner(&a[0].0, w.get(0, j));
            rhs += grid.tau() * fem.mass_inner(v.get(0, j), &b[0].0);
        }
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn state_is_affine_in_the_control(
        seed in any::<u64>(),
        alphas in prop::array::uniform4(-1.0f64..1.0),
        u1 in vec_strategy(3 * 6 * 5),
        u2 in vec_strategy(3 * 6 * 5),
    ) {
        let fem = FemSystem::uniform(6).unwrap();
        let grid = TimeGrid::new(0.5, 6).unwrap();
        let c = LinearSpdeCoeffs::constant(alphas[0], alphas[1], alphas[2], alphas[3], 6);
        let batch = sample_brownian(&grid, 3, seed, false).unwrap();
        let y0 = vec![0.3, -0.1, 0.0, 0.2, 0.5];
        let f1 = PathField::from_vec(3, 6, 5, u1).unwrap();
        let f2 = PathField::from_vec(3, 6, 5, u2).unwrap();
        let sum = f1.add_scaled(1.0, &f2).unwrap();
        let solve = |u: &PathField| solve_state(&fem, &grid, &c, u, &batch, &y0).unwrap().values;
        let (a, b, s, z) = (solve(&f1), solve(&f2), solve(&sum), solve(&PathField::zeros(3, 6, 5)));
        for i in 0..s.as_slice().len() {
            let expect = a.as_slice()[i] + b.as_slice()[i] - z.as_slice()[i];
            prop_assert!((s.as_slice()[i] - expect).abs() < 1e-10 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn state_ignores_future_increments(seed in any::<u64>(), j in 0usize..8) {
        let fem = FemSystem::uniform(5).unwrap();
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let c = LinearSpdeCoeffs::constant(0.5, 1.0, 0.7, 0.3, 8);
        let batch = sample_brownian(&grid, 4, seed, false).unwrap();
        let u = PathField::sample(
            &BrownianScaled { shape: vec![1.0, 2.0, 0.0, -1.0], tau: grid.tau(), coeff: |t: f64, w: f64| t + w },
            &batch,
            8,
        );
        let y0 = vec![1.0; 4];
        let mut inc = batch.increments().to_vec();
        for p in 0..4 {
            for v in &mut inc[p * 8 + j..(p + 1) * 8] {
                *v = -2.0 * *v + 0.5;
            }
        }
        let other = BrownianBatch::from_increments(grid, 4, inc, 0).unwrap();
        let u_other = PathField::sample(
            &BrownianScaled { shape: vec![1.0, 2.0, 0.0, -1.0], tau: grid.tau(), coeff: |t: f64, w: f64| t + w },
            &other,
            8,
        );
        let a = solve_state(&fem, &grid, &c, &u, &batch, &y0).unwrap();
        let b = solve_state(&fem, &grid, &c, &u_other, &other, &y0).unwrap();
        for p in 0..4 {
            prop_assert_eq!(a.get(p, j), b.get(p, j));
        }
    }

    #[test]
    fn policy_ignores_current_and_future_increments(seed in any::<u64>(), j in 0usize..6) {
        let fem = FemSystem::uniform(4).unwrap();
        let grid = TimeGrid::new(0.2, 6).unwrap();
        let stack = PolicyStack::new(&[5, 5], 6, seed, Precision::F64).unwrap();
        let batch = sample_brownian(&grid, 3, seed ^ 1, false).unwrap();
        let mut inc = batch.increments().to_vec();
        for p in 0..3 {
            inc[p * 6 + j..(p + 1) * 6].reverse();
            for v in &mut inc[p * 6 + j..(p + 1) * 6] {
                *v += 1.0;
            }
        }
        let other = BrownianBatch::from_increments(grid, 3, inc, 0).unwrap();
        let a = eval_policy(&stack, &fem, &batch).unwrap();
        let b = eval_policy(&stack, &fem, &other).unwrap();
        for p in 0..3 {
            prop_assert_eq!(a.get(p, j), b.get(p, j));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn terminal_value_is_reproduced_exactly(seed in any::<u64>(), shape in vec_strategy(3)) {
        let fem = FemSystem::uniform(4).unwrap();
        let grid = TimeGrid::new(0.5, 6).unwrap();
        let batch = sample_brownian(&grid, 40, seed, false).unwrap();
        let term = BrownianTerminal { shape: shape.clone(), coeff: Arc::new(|w: f64| 1.0 + w * w) };
        let sol = solve_backward(
            &BspdeProblem {
                driver: Box::new(LinearDriver { k: vec![0.5; 6], lipschitz: 0.5 }),
                terminal: Box::new(term),
                grid,
                extra: None,
            },
            &fem,
            &batch,
            &RegressionBasis::default(),
            &PicardConfig::default(),
        )
        .unwrap();
        for p in 0..40 {
            let c = 1.0 + batch.w(p, 6) * batch.w(p, 6);
            let expect: Vec<f64> = shape.iter().map(|s| c * s).collect();
            prop_assert_eq!(sol.p.get(p, 6), expect.as_slice());
        }
    }

    #[test]
    fn backward_solutions_superpose(seed in any::<u64>(), s1 in vec_strategy(3), s2 in vec_strategy(3)) {
        let fem = FemSystem::uniform(4).unwrap();
        let grid = TimeGrid::new(0.5, 6).unwrap();
        let batch = sample_brownian(&grid, 100, seed, false).unwrap();
        let solve = |shape: Vec<f64>| {
            solve_backward(
                &BspdeProblem {
                    driver: Box::new(LinearDriver { k: vec![0.8; 6], lipschitz: 0.8 }),
                    terminal: Box::new(BrownianTerminal { shape, coeff: Arc::new(|w: f64| w.sin() + 2.0) }),
                    grid,
                    extra: None,
                },
                &fem,
                &batch,
                &RegressionBasis::default(),
                &PicardConfig::default(),
            )
            .unwrap()
        };
        let sum: Vec<f64> = s1.iter().zip(&s2).map(|(a, b)| a + b).collect();
        let (a, b, c) = (solve(s1), solve(s2), solve(sum));
        let pa = a.p.add_scaled(1.0, &b.p).unwrap();
        let za = a.z.add_scaled(1.0, &b.z).unwrap();
        for (x, y) in pa.as_slice().iter().zip(c.p.as_slice()).chain(za.as_slice().iter().zip(c.z.as_slice())) {
            prop_assert!((x - y).abs() < 1e-8 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn mlp_gradient_matches_central_differences(
        seed in any::<u64>(),
        widths in prop::collection::vec(1usize..7, 2..5),
        x in vec_strategy(6),
    ) {
        let net = MlpNet::init(&widths, seed).unwrap();
        let input = &x[..widths[0]];
        let cache = net.forward_cached(input).unwrap();
        let mut upstream = vec![0.0; net.output_dim()];
        upstream[0] = 1.0;
        let g = net.backward(Some(&cache), &upstream).unwrap();
        let fd = central_differences(&net, input, 1e-5);
        // finite differences are meaningless when a step crosses a ReLU kink
        prop_assume!(min_hidden_preactivation(&net, input) > 1e-3);
        prop_assert!(max_relative_error(&g.params, &fd) <= 1e-5);
    }

    #[test]
    fn batched_forward_matches_single_forwards(
        seed in any::<u64>(),
        widths in prop::collection::vec(1usize..6, 2..5),
        xs in prop::collection::vec(-3.0f64..3.0, 30),
    ) {
        let net = MlpNet::init(&widths, seed).unwrap();
        let d = widths[0];
        let k = 30 / d;
        let batch = net.forward_batch(&xs[..k * d]).unwrap();
        for i in 0..k {
            let single = net.forward(&xs[i * d..(i + 1) * d]).unwrap();
            prop_assert_eq!(&batch[i * single.len()..(i + 1) * single.len()], single.as_slice());
        }
    }
}

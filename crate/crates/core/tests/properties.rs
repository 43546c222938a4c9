//! Randomised invariants of the discrete operators, data generation and
//! solvers.

mod common;

use common::*;
use mfg_inverse::field::{PolicyField, ScalarField};
use mfg_inverse::forward::{generate_data_with, policy_iteration_forward, DataKind, DataOptions, TerminalRateScheme};
use mfg_inverse::grid::{divergence_conservative, eo_hamiltonian, integrate, l2_norm, one_sided_gradients};
use mfg_inverse::inverse::{closed_form_b_with, policy_iteration_inverse, policy_update, InverseOptions};
use mfg_inverse::optim::{minimize, Options};
use mfg_inverse::pde::{solve_fp, solve_fp_with};
use mfg_inverse::sparse::{assemble_fp_step, assemble_hjb_step};
use mfg_inverse::{make_grid, Coupling, MfgProblem};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn problem_with(dim: usize, n: usize, nt: usize, m0: Vec<f64>) -> MfgProblem {
    let grid = make_grid(dim, n, nt, 1.0).unwrap();
    let ut = vec![0.0; grid.n_space()];
    MfgProblem::new(grid, 0.2, m0, ut, Coupling::Power(2.0)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fp_conserves_mass_and_positivity(dim in 1usize..=2, seed in any::<u64>(), scale in 0.1f64..20.0) {
        let n = if dim == 1 { 24 } else { 7 };
        let grid = make_grid(dim, n, 15, 1.0).unwrap();
        let m0: Vec<f64> = random_vec(grid.n_space(), seed).iter().map(|v| v.abs() + 1e-3).collect();
        let p = problem_with(dim, n, 15, m0);
        let q = random_policy(&p.grid, scale, seed ^ 0x5a5a);
        let m = solve_fp(&p, &q).unwrap();
        for lvl in 1..p.grid.levels() {
            let prev = integrate(&p.grid, m.level(lvl - 1));
            prop_assert!((integrate(&p.grid, m.level(lvl)) - prev).abs() <= 1e-10);
            prop_assert!(m.level(lvl).iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn fp_step_is_transpose_of_hjb_step(dim in 1usize..=2, seed in any::<u64>(), scale in 0.0f64..50.0) {
        let grid = make_grid(dim, 6, 10, 1.0).unwrap();
        let q = random_policy(&grid, scale, seed);
        let fp = assemble_fp_step(&grid, q.level(0), 0.3).unwrap().to_dense();
        let hjb = assemble_hjb_step(&grid, q.level(0), 0.3).unwrap().to_dense();
        for r in 0..fp.len() {
            for c in 0..fp.len() {
                prop_assert!((fp[r][c] - hjb[c][r]).abs() <= 1e-14);
            }
        }
    }

    #[test]
    fn divergence_has_zero_integral(dim in 1usize..=2, seed in any::<u64>()) {
        let grid = make_grid(dim, 9, 4, 1.0).unwrap();
        let m = random_vec(grid.n_space(), seed);
        let q = random_policy(&grid, 3.0, seed.wrapping_add(1));
        prop_assert!(integrate(&grid, &divergence_conservative(&grid, &m, q.level(0))).abs() < 1e-12);
    }

    #[test]
    fn eo_hamiltonian_is_consistent(dim in 1usize..=2, p in prop::collection::vec(-10.0f64..10.0, 2)) {
        let grid = make_grid(dim, 4, 2, 1.0).unwrap();
        // equal one-sided slopes give the exact ½|p|²
        let point: Vec<f64> = (0..2 * dim).map(|j| p[j % dim]).collect();
        let slopes: Vec<f64> = point.iter().cycle().take(grid.n_space() * 2 * dim).copied().collect();
        let h = eo_hamiltonian(&grid, &slopes);
        let exact = 0.5 * p[..dim].iter().map(|v| v * v).sum::<f64>();
        prop_assert!(h.iter().all(|v| (v - exact).abs() <= 1e-12 * exact.max(1.0)));
        let random = random_policy(&grid, 5.0, p[0].to_bits());
        prop_assert!(eo_hamiltonian(&grid, random.level(0)).iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn policy_update_is_slope_representation(seed in any::<u64>(), c in -5.0f64..5.0) {
        let grid = make_grid(1, 12, 5, 1.0).unwrap();
        let mut u = ScalarField::zeros(&grid);
        for n in 0..grid.levels() {
            u.level_mut(n).copy_from_slice(&random_vec(12, seed.wrapping_add(n as u64)));
        }
        let q = policy_update(&grid, &u);
        for n in 0..grid.levels() {
            let expect = one_sided_gradients(&grid, u.level(n));
            prop_assert_eq!(q.level(n), expect.as_slice());
        }
        let flat = ScalarField::constant_in_time(&grid, &[c; 12]);
        prop_assert!(policy_update(&grid, &flat).slopes().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn quadratics_are_minimised_exactly(n in 2usize..12, seed in any::<u64>()) {
        let a = random_vec(n * n, seed);
        let a = DMatrix::from_column_slice(n, n, &a);
        let spd = &a * a.transpose() + DMatrix::identity(n, n);
        let rhs = random_vec(n, seed ^ 1);
        let expect = solve(&spd, &rhs);
        let f = |x: &[f64]| {
            let ax = &spd * nalgebra::DVector::from_column_slice(x);
            let g: Vec<f64> = ax.iter().zip(&rhs).map(|(a, b)| a - b).collect();
            let v = 0.5 * x.iter().zip(ax.iter()).map(|(x, a)| x * a).sum::<f64>() - x.iter().zip(&rhs).map(|(x, b)| x * b).sum::<f64>();
            Ok((v, g))
        };
        let r = minimize(f, &vec![0.0; n], &Options { opt_tol: 1e-10, max_iter: 500 }).unwrap();
        prop_assert!(max_abs_diff(&r.minimizer, &expect) < 1e-8);
        prop_assert!(r.objective_history.windows(2).all(|w| w[1] <= w[0] + 1e-14 * w[0].abs()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn closed_form_inverts_terminal_rate(seed in any::<u64>(), backward in any::<bool>()) {
        let (p, _) = bump_problem(1, 16, 20, 1.0, Coupling::Power(2.0));
        let b: Vec<f64> = random_vec(16, seed).iter().map(|v| 0.5 * v).collect();
        let scheme = if backward { TerminalRateScheme::BackwardDifference } else { TerminalRateScheme::EquationResidual };
        let opts = DataOptions { scheme, ..DataOptions::new(DataKind::TerminalRate) };
        let (data, sol) = generate_data_with(&p, &b, &opts).unwrap();
        let rec = closed_form_b_with(&p, &sol.q, &sol.m, &data.g, scheme);
        prop_assert!(max_abs_diff(&rec, &b) < 1e-8, "{}", max_abs_diff(&rec, &b));
    }

    #[test]
    fn forward_solution_is_fixed_point(seed in any::<u64>()) {
        let (p, _) = bump_problem(1, 16, 20, 1.0, Coupling::Power(2.0));
        let b = random_vec(16, seed);
        let tol = 1e-9;
        let sol = policy_iteration_forward(&p, &b, &PolicyField::zeros(&p.grid), tol, 200).unwrap();
        prop_assert_eq!(sol.policy_gap_history.len(), sol.iterations);
        prop_assert!(*sol.policy_gap_history.last().unwrap() < tol);
        let r = mfg_inverse::forward::mfg_residual(&p, &b, &sol.u, &sol.m, &sol.q);
        prop_assert!(r.fp <= 10.0 * tol && r.hjb <= 10.0 * tol && r.hjb_nonlinear <= 10.0 * tol && r.policy <= 10.0 * tol);
        // (u, m) are computed with the returned policy
        let m = solve_fp_with(&p.step_operators(&sol.q), &p.m0).unwrap();
        prop_assert!(max_abs_diff(m.values(), sol.m.values()) == 0.0);
    }

    #[test]
    fn inverse_histories_match_iterations(seed in any::<u64>(), initial in any::<bool>()) {
        let (p, _) = bump_problem(1, 12, 12, 1.0, Coupling::Power(2.0));
        let b: Vec<f64> = random_vec(12, seed).iter().map(|v| 0.3 * v).collect();
        let kind = if initial { DataKind::InitialValue } else { DataKind::TerminalRate };
        let (data, _) = generate_data_with(&p, &b, &DataOptions::new(kind)).unwrap();
        let tol = 1e-8;
        let opts = InverseOptions { tol, ..Default::default() };
        let r = policy_iteration_inverse(&p, &data, &PolicyField::zeros(&p.grid), &opts, Some(&b)).unwrap();
        prop_assert_eq!(r.policy_gap_history.len(), r.iterations);
        prop_assert_eq!(r.b_error_history.len(), r.iterations);
        prop_assert_eq!(r.objective_history.len(), r.iterations);
        prop_assert!(*r.policy_gap_history.last().unwrap() < tol);
        prop_assert!(l2_norm(&p.grid, &r.b).is_finite());
    }
}

#[test]
fn noiseless_data_ignores_seed() {
    let (p, b) = bump_problem(1, 16, 20, 1.0, Coupling::Power(2.0));
    let gen = |noise: f64, seed: u64| {
        let o = DataOptions { noise_level: noise, seed, extra_times: vec![0.5], ..DataOptions::new(DataKind::InitialValue) };
        generate_data_with(&p, &b, &o).unwrap().0
    };
    let (a, c) = (gen(0.0, 1), gen(0.0, 99));
    assert_eq!(a.g, c.g);
    assert_eq!(Some(&a.g), a.clean.as_ref());
    assert_eq!(a.extra, c.extra);
    assert_eq!(gen(0.01, 5).g, gen(0.01, 5).g);
    assert_ne!(gen(0.01, 5).g, gen(0.01, 6).g);
}

#[test]
fn noise_magnitude_matches_level() {
    let (p, b) = bump_problem(1, 50, 20, 1.0, Coupling::Power(2.0));
    let level = 0.01;
    let (base, _) = generate_data_with(&p, &b, &DataOptions::new(DataKind::InitialValue)).unwrap();
    let clean = base.clean.unwrap();
    let norm = l2_norm(&p.grid, &clean);
    let seeds = 1000;
    let mean = (0..seeds)
        .map(|seed| {
            let o = DataOptions { noise_level: level, seed, ..DataOptions::new(DataKind::InitialValue) };
            let d = generate_data_with(&p, &b, &o).unwrap().0;
            assert_eq!(d.clean.as_ref(), Some(&clean));
            let e: Vec<f64> = d.g.iter().zip(&clean).map(|(g, c)| g - c).collect();
            l2_norm(&p.grid, &e) / norm
        })
        .sum::<f64>()
        / seeds as f64;
    assert!((mean - level).abs() <= 0.05 * level, "mean relative noise {mean}");
}

//! Sparse solvers against dense matrices assembled independently.

mod common;

use common::*;
use mfg_inverse::field::{PolicyField, ScalarField};
use mfg_inverse::inverse::{invert_step_u0, Step2Objective};
use mfg_inverse::pde::{solve_adjoint_w, solve_fp, solve_hjb_linear};
use mfg_inverse::sparse::{assemble_fp_step, assemble_hjb_step};
use mfg_inverse::Coupling;
use nalgebra::{DMatrix, DVector};

const I: usize = 8;
const N: usize = 10;

fn setup(dim: usize, seed: u64) -> (mfg_inverse::MfgProblem, Vec<f64>, PolicyField) {
    let (p, b) = bump_problem(dim, I, N, 1.0, Coupling::Power(2.0));
    let q = random_policy(&p.grid, 2.0, seed);
    (p, b, q)
}

#[test]
fn fp_matches_dense() {
    for dim in [1, 2] {
        let (p, _, q) = setup(dim, 1);
        let m = solve_fp(&p, &q).unwrap();
        let mut cur = p.m0.clone();
        for n in 0..N {
            let a = dense_hjb_step(&p.grid, q.level(n), p.eps).transpose();
            cur = solve(&a, &cur);
            assert!(max_abs_diff(&cur, m.level(n + 1)) < 1e-8, "dim {dim} level {}", n + 1);
        }
    }
}

#[test]
fn hjb_matches_dense() {
    for dim in [1, 2] {
        let (p, b, q) = setup(dim, 2);
        let m = solve_fp(&p, &q).unwrap();
        let u = solve_hjb_linear(&p, &q, &m, &b).unwrap();
        let dt = p.grid.dt();
        let mut cur = p.u_terminal.clone();
        for n in (0..N).rev() {
            let l = eo(&p.grid, q.level(n));
            let rhs: Vec<f64> =
                (0..cur.len()).map(|i| cur[i] + dt * (l[i] + b[i] + m.level(n)[i].powi(2))).collect();
            cur = solve(&dense_hjb_step(&p.grid, q.level(n), p.eps), &rhs);
            assert!(max_abs_diff(&cur, u.level(n)) < 1e-8, "dim {dim} level {n}");
        }
    }
}

#[test]
fn adjoint_matches_dense() {
    for dim in [1, 2] {
        let (p, _, q) = setup(dim, 3);
        let w0 = random_vec(p.grid.n_space(), 4);
        let w = solve_adjoint_w(&p, &q, &w0).unwrap();
        let mut cur = w0.clone();
        for n in 0..N {
            cur = solve(&dense_hjb_step(&p.grid, q.level(n), p.eps).transpose(), &cur);
            assert!(max_abs_diff(&cur, w.level(n + 1)) < 1e-8);
        }
    }
}

/// Dense Jacobian of the affine map `b ↦ u(·,0)` at fixed `(q, m)`, and its offset.
fn dense_data_map(p: &mfg_inverse::MfgProblem, q: &PolicyField, m: &ScalarField) -> (DMatrix<f64>, Vec<f64>) {
    let n = p.grid.n_space();
    let c = solve_hjb_linear(p, q, m, &vec![0.0; n]).unwrap().level(0).to_vec();
    let mut j = DMatrix::zeros(n, n);
    for col in 0..n {
        let mut e = vec![0.0; n];
        e[col] = 1.0;
        let u = solve_hjb_linear(p, q, m, &e).unwrap();
        for row in 0..n {
            j[(row, col)] = u.level(0)[row] - c[row];
        }
    }
    (j, c)
}

#[test]
fn step2_gradient_is_transpose_of_data_map() {
    let (p, b, q) = setup(1, 5);
    let m = solve_fp(&p, &q).unwrap();
    let (j, c) = dense_data_map(&p, &q, &m);
    let g = random_vec(I, 6);
    let ops = p.step_operators(&q);
    let (_, grad) = Step2Objective::new(&p, &ops, &m, &g, &[], 0.0).evaluate(&b).unwrap();
    let r: Vec<f64> = (j.clone() * DVector::from_column_slice(&b)).iter().zip(&c).zip(&g).map(|((a, c), g)| a + c - g).collect();
    // L² gradient of ½ dx ‖J b + c − g‖²: Jᵀ r, since the dx weights cancel.
    let expect = j.transpose() * DVector::from_column_slice(&r);
    assert!(max_abs_diff(&grad, expect.as_slice()) < 1e-8);
}

#[test]
fn step2_minimizer_solves_normal_equations() {
    let (p, b, q) = setup(1, 7);
    let m = solve_fp(&p, &q).unwrap();
    let (j, c) = dense_data_map(&p, &q, &m);
    let g: Vec<f64> = random_vec(I, 8).iter().map(|v| 0.1 * v).collect();
    let gamma = 1e-3;
    // (Jᵀ J − γ Δ_h) b = Jᵀ (g − c)
    let dx = p.grid.dx();
    let mut lap = DMatrix::zeros(I, I);
    for i in 0..I {
        lap[(i, i)] = -2.0 / (dx * dx);
        lap[(i, (i + 1) % I)] += 1.0 / (dx * dx);
        lap[(i, (i + I - 1) % I)] += 1.0 / (dx * dx);
    }
    let lhs = j.transpose() * &j - lap * gamma;
    let rhs: Vec<f64> = g.iter().zip(&c).map(|(g, c)| g - c).collect();
    let rhs = j.transpose() * DVector::from_column_slice(&rhs);
    let expect = solve(&lhs, rhs.as_slice());

    let report = invert_step_u0(&p, &q, &m, &g, gamma, &b, 1e-10).map_err(|e| e.to_string()).unwrap();
    assert!(max_abs_diff(&report.minimizer, &expect) < 1e-6, "{}", max_abs_diff(&report.minimizer, &expect));
}

#[test]
fn transport_matrices_are_transposes() {
    for dim in [1, 2] {
        let (p, _) = bump_problem(dim, 6, N, 1.0, Coupling::Power(2.0));
        let q = random_policy(&p.grid, 5.0, 9);
        for n in [0, N / 2] {
            let fp = assemble_fp_step(&p.grid, q.level(n), p.eps).unwrap().to_dense();
            let hjb = assemble_hjb_step(&p.grid, q.level(n), p.eps).unwrap().to_dense();
            let dense = dense_hjb_step(&p.grid, q.level(n), p.eps);
            for r in 0..fp.len() {
                for c in 0..fp.len() {
                    assert!((fp[r][c] - hjb[c][r]).abs() <= 1e-14);
                    assert!((hjb[r][c] - dense[(r, c)]).abs() <= 1e-14);
                }
            }
        }
    }
}

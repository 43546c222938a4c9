#![allow(dead_code)]

use std::f64::consts::PI;

use mfg_inverse::field::PolicyField;
use mfg_inverse::grid::Grid;
use mfg_inverse::{make_grid, Coupling, MfgProblem};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn bump_problem(dim: usize, n: usize, nt: usize, horizon: f64, coupling: Coupling) -> (MfgProblem, Vec<f64>) {
    let grid = make_grid(dim, n, nt, horizon).unwrap();
    let m0 = grid.sample(|x| (-20.0 * x.iter().map(|v| (v - 0.5).powi(2)).sum::<f64>()).exp());
    let ut: Vec<f64> = m0.iter().map(|v| -v).collect();
    let b = grid.sample(|x| x.iter().map(|v| 0.3 * (2.0 * PI * v).sin() + 0.1 * (4.0 * PI * v).cos()).sum());
    (MfgProblem::new(grid, 0.3, m0, ut, coupling).unwrap(), b)
}

pub fn random_policy(grid: &Grid, scale: f64, seed: u64) -> PolicyField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = PolicyField::zeros(grid);
    for n in 0..grid.levels() {
        q.level_mut(n).iter_mut().for_each(|v| *v = scale * rng.random_range(-1.0..1.0));
    }
    q
}

pub fn random_vec(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Periodic neighbour of `i` along `axis` by `shift` (±1), row-major.
fn neighbour(grid: &Grid, i: usize, axis: usize, shift: isize) -> usize {
    let n = grid.points_per_dim();
    let d = grid.dim();
    let stride = n.pow((d - 1 - axis) as u32);
    let c = (i / stride) % n;
    let c2 = (c as isize + shift).rem_euclid(n as isize) as usize;
    i - c * stride + c2 * stride
}

/// `I + dt(−εΔ + Adv[q])`, assembled entry by entry.
pub fn dense_hjb_step(grid: &Grid, q: &[f64], eps: f64) -> DMatrix<f64> {
    let n = grid.n_space();
    let d = grid.dim();
    let (dx, dt) = (grid.dx(), grid.dt());
    let mut a = DMatrix::identity(n, n);
    for i in 0..n {
        let s = &q[i * 2 * d..(i + 1) * 2 * d];
        for k in 0..d {
            let (p, nx) = (neighbour(grid, i, k, -1), neighbour(grid, i, k, 1));
            let diff = dt * eps / (dx * dx);
            a[(i, i)] += 2.0 * diff;
            a[(i, p)] -= diff;
            a[(i, nx)] -= diff;
            let back = s[k].max(0.0) * dt / dx;
            a[(i, i)] += back;
            a[(i, p)] -= back;
            let fwd = s[d + k].min(0.0) * dt / dx;
            a[(i, nx)] += fwd;
            a[(i, i)] -= fwd;
        }
    }
    a
}

pub fn solve(a: &DMatrix<f64>, rhs: &[f64]) -> Vec<f64> {
    a.clone().lu().solve(&DVector::from_column_slice(rhs)).unwrap().as_slice().to_vec()
}

/// `½ Σ_k max(D⁻,0)² + min(D⁺,0)²` of the slopes at each point.
pub fn eo(grid: &Grid, q: &[f64]) -> Vec<f64> {
    let d = grid.dim();
    q.chunks(2 * d)
        .map(|s| 0.5 * (0..d).map(|k| s[k].max(0.0).powi(2) + s[d + k].min(0.0).powi(2)).sum::<f64>())
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

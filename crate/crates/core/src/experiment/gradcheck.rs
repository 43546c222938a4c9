//! Finite-difference check of the adjoint gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::ExperimentConfig;
use super::preset::preset_problem;
use super::run::synthetic_data;
use crate::direct_ls::{gradient_direct, objective_direct};
use crate::field::PolicyField;
use crate::forward::{policy_iteration_forward, DataKind};
use crate::grid::inner;
use crate::inverse::Step2Objective;
use crate::Result;

pub const DIRECTIONS: usize = 10;
pub const STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Worst relative error of the direct least-squares gradient.
    pub direct: f64,
    /// Worst relative error of the step-(ii) gradient (initial-value data only).
    pub step2: Option<f64>,
}

fn rel(fd: f64, adj: f64) -> f64 {
    (fd - adj).abs() / fd.abs().max(adj.abs()).max(f64::MIN_POSITIVE)
}

/// Compares central differences against adjoint directional derivatives at
/// `b = b*/2` along random directions.
pub fn gradcheck(cfg: &ExperimentConfig) -> Result<GradCheck> {
    let (prob, b_true) = preset_problem(cfg)?;
    let grid = prob.grid;
    let data = synthetic_data(cfg, &prob, &b_true)?;
    let b: Vec<f64> = b_true.iter().map(|v| 0.5 * v).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dirs: Vec<Vec<f64>> =
        (0..DIRECTIONS).map(|_| (0..grid.n_space()).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
    let shift = |d: &[f64], s: f64| -> Vec<f64> { b.iter().zip(d).map(|(a, e)| a + s * e).collect() };

    let fwd_tol = cfg.data_tol;
    let grad = gradient_direct(&prob, &b, &data, cfg.gamma, fwd_tol, cfg.adj_tol)?;
    let mut direct: f64 = 0.0;
    for d in &dirs {
        let fp = objective_direct(&prob, &shift(d, STEP), &data, cfg.gamma, fwd_tol)?;
        let fm = objective_direct(&prob, &shift(d, -STEP), &data, cfg.gamma, fwd_tol)?;
        direct = direct.max(rel((fp - fm) / (2.0 * STEP), inner(&grid, &grad, d)));
    }

    let step2 = if data.kind == DataKind::InitialValue {
        let sol = policy_iteration_forward(&prob, &b, &PolicyField::zeros(&grid), fwd_tol, crate::forward::DATA_MAX_ITER)?;
        let ops = prob.step_operators(&sol.q);
        let obj = Step2Objective::new(&prob, &ops, &sol.m, &data.g, &data.extra, cfg.gamma);
        let (_, g) = obj.evaluate(&b)?;
        let mut worst: f64 = 0.0;
        for d in &dirs {
            let fp = obj.evaluate(&shift(d, STEP))?.0;
            let fm = obj.evaluate(&shift(d, -STEP))?.0;
            worst = worst.max(rel((fp - fm) / (2.0 * STEP), inner(&grid, &g, d)));
        }
        Some(worst)
    } else {
        None
    };
    Ok(GradCheck { direct, step2 })
}

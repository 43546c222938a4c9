//! Policy iteration for the inverse problem.
//!
//! Each outer iteration freezes the policy `q`, which makes the FP equation
//! independent of `u` and the HJB equation linear in `(u, b)`:
//!
//! 1. `m ← FP(q)`
//! 2. `b ←` the solution of the linear inverse source problem for
//!    `HJB(q, m, b)` against the data, then `u ← HJB(q, m, b)`
//! 3. `q ← ∇_h u`
//!
//! For terminal-rate data step 2 is explicit. For initial-value data it is
//! a convex quadratic minimised by BFGS, warm-started from the previous `b`,
//! with gradients from one adjoint (forward) sweep.

use std::time::Instant;

use crate::field::{PolicyField, ScalarField};
use crate::forward::{terminal_rate_base, DataKind, InverseData, Observation, TerminalRateScheme};
use crate::grid::{advection_apply, eo_hamiltonian, gradient_energy, l2_norm, laplacian_apply, Grid};
use crate::optim::{self, OptimReport};
use crate::pde::{forward_sweep, solve_fp_with, solve_hjb_linear_with, MfgProblem};
use crate::sparse::StepOperators;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct InverseResult {
    pub b: Vec<f64>,
    pub u: ScalarField,
    pub m: ScalarField,
    /// Policy that `(u, m)` were computed with.
    pub q: PolicyField,
    pub iterations: usize,
    pub policy_gap_history: Vec<f64>,
    /// `‖b^{(k)} − b*‖_{L²}` per iteration; empty without ground truth.
    pub b_error_history: Vec<f64>,
    /// Objective value at the end of each iteration (step-(ii) objective
    /// for policy iteration, full misfit for direct least squares).
    pub objective_history: Vec<f64>,
    /// Quasi-Newton iterations spent inside each outer iteration.
    pub inner_iterations: Vec<usize>,
    pub wall_time_seconds: f64,
}

/// Optimality tolerance of the step-(ii) minimisation per outer iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptTolSchedule {
    Fixed(f64),
    /// `max(start · 2^{1−k}, floor)` at outer iteration `k`.
    Halving { start: f64, floor: f64 },
}

impl OptTolSchedule {
    pub fn at(&self, k: usize) -> f64 {
        match *self {
            Self::Fixed(t) => t,
            Self::Halving { start, floor } => (start * 0.5f64.powi(k.saturating_sub(1) as i32)).max(floor),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct InverseOptions {
    /// Policy-gap tolerance τ.
    pub tol: f64,
    /// Weight of the `γ/2 ‖∇b‖²` regulariser.
    pub gamma: f64,
    pub opt_tol: OptTolSchedule,
    pub max_iter: usize,
    /// Iteration cap of each step-(ii) minimisation.
    pub opt_max_iter: usize,
}

impl Default for InverseOptions {
    fn default() -> Self {
        Self { tol: 1e-9, gamma: 0.0, opt_tol: OptTolSchedule::Fixed(1e-10), max_iter: 100, opt_max_iter: 2000 }
    }
}

/// `q = H_p(∇u) = ∇_h u` for the quadratic Hamiltonian.
pub fn policy_update(grid: &Grid, u: &ScalarField) -> PolicyField {
    PolicyField::from_value(grid, u)
}

/// Obstacle reproducing terminal-rate data `g` exactly, for the default
/// (equation-residual) discretisation of `∂ₜu(·,T)`:
/// `b = −g − εΔ_h u_T + Ĥ(∇_h u_T) − F(m(·,T))`.
pub fn closed_form_b(prob: &MfgProblem, q: &PolicyField, m: &ScalarField, g: &[f64]) -> Vec<f64> {
    closed_form_b_with(prob, q, m, g, TerminalRateScheme::EquationResidual)
}

/// As [`closed_form_b`] for either discretisation. For backward-difference
/// data the last implicit step is inverted: with `u^{N−1} = u_T − dt·g`,
/// `b = −g + (−εΔ_h + Adv[q^{N−1}]) u^{N−1} − L_h(q^{N−1}) − F(m^{N−1})`.
pub fn closed_form_b_with(
    prob: &MfgProblem,
    q: &PolicyField,
    m: &ScalarField,
    g: &[f64],
    scheme: TerminalRateScheme,
) -> Vec<f64> {
    match scheme {
        TerminalRateScheme::EquationResidual => {
            let base = terminal_rate_base(prob, m.last());
            base.iter().zip(g).map(|(a, g)| a - g).collect()
        }
        TerminalRateScheme::BackwardDifference => {
            let grid = &prob.grid;
            let n = grid.time_steps() - 1;
            let dt = grid.dt();
            let prev: Vec<f64> = prob.u_terminal.iter().zip(g).map(|(u, g)| u - dt * g).collect();
            let ql = q.level(n);
            let lap = laplacian_apply(grid, &prev);
            let adv = advection_apply(grid, ql, &prev);
            let lag = eo_hamiltonian(grid, ql);
            (0..g.len())
                .map(|i| -g[i] - prob.eps * lap[i] + adv[i] - lag[i] - prob.coupling.value(m.level(n)[i]))
                .collect()
        }
    }
}

/// The step-(ii) objective for initial-value data with frozen `(q, m)`:
///
/// `Φ(b) = ½‖u(·,0) − g‖² + Σ_obs ½‖u(·,t_obs) − g_obs‖² + γ/2 ‖∇_h b‖²`.
///
/// The gradient is returned as an `L²` Riesz representative: the right-
/// endpoint time integral of the adjoint `w` (FP sweep started from the
/// initial misfit, with each extra misfit injected at its level) plus
/// `−γΔ_h b`.
pub struct Step2Objective<'p, 'q> {
    prob: &'p MfgProblem,
    ops: &'p StepOperators<'q>,
    m: &'p ScalarField,
    g: &'p [f64],
    extra: &'p [Observation],
    gamma: f64,
}

impl<'p, 'q> Step2Objective<'p, 'q> {
    pub fn new(
        prob: &'p MfgProblem,
        ops: &'p StepOperators<'q>,
        m: &'p ScalarField,
        g: &'p [f64],
        extra: &'p [Observation],
        gamma: f64,
    ) -> Self {
        Self { prob, ops, m, g, extra, gamma }
    }

    pub fn evaluate(&self, b: &[f64]) -> Result<(f64, Vec<f64>)> {
        let grid = &self.prob.grid;
        let u = solve_hjb_linear_with(self.prob, self.ops, self.m, b)?;
        let misfit = |level: usize, g: &[f64]| -> Vec<f64> { u.level(level).iter().zip(g).map(|(a, b)| a - b).collect() };
        let r0 = misfit(0, self.g);
        let injections: Vec<(usize, Vec<f64>)> = self.extra.iter().map(|o| (o.level, misfit(o.level, &o.g))).collect();

        let mut value = 0.5 * l2_norm(grid, &r0).powi(2);
        for (_, r) in &injections {
            value += 0.5 * l2_norm(grid, r).powi(2);
        }
        let w = forward_sweep(self.ops, &r0, |n, rhs| {
            for (lvl, r) in &injections {
                if *lvl == n {
                    rhs.iter_mut().zip(r).for_each(|(a, b)| *a += b);
                }
            }
        })?;
        let mut grad = w.time_integral(grid);
        if self.gamma > 0.0 {
            value += 0.5 * self.gamma * gradient_energy(grid, b);
            let lap = laplacian_apply(grid, b);
            grad.iter_mut().zip(&lap).for_each(|(g, l)| *g -= self.gamma * l);
        }
        Ok((value, grad))
    }

    /// `u(·,0)` for an obstacle `b`, i.e. the linear data map plus offset.
    pub fn initial_value(&self, b: &[f64]) -> Result<Vec<f64>> {
        Ok(solve_hjb_linear_with(self.prob, self.ops, self.m, b)?.level(0).to_vec())
    }
}

/// Step-(ii) objective and `L²` gradient for a single `u(·,0)` observation.
pub fn step2_gradient_u0(
    prob: &MfgProblem,
    q: &PolicyField,
    m: &ScalarField,
    b: &[f64],
    g: &[f64],
    gamma: f64,
) -> Result<(f64, Vec<f64>)> {
    prob.grid.check_spatial(b, "obstacle")?;
    prob.grid.check_spatial(g, "observation")?;
    let ops = prob.step_operators(q);
    Step2Objective::new(prob, &ops, m, g, &[], gamma).evaluate(b)
}

/// Minimises the step-(ii) objective from `b_init` until the sup norm of
/// the `L²` gradient is at most `opt_tol`.
pub fn invert_step_u0(
    prob: &MfgProblem,
    q: &PolicyField,
    m: &ScalarField,
    g: &[f64],
    gamma: f64,
    b_init: &[f64],
    opt_tol: f64,
) -> Result<OptimReport> {
    let ops = prob.step_operators(q);
    let obj = Step2Objective::new(prob, &ops, m, g, &[], gamma);
    minimize_step2(&obj, b_init, opt_tol, InverseOptions::default().opt_max_iter)
}

fn minimize_step2(obj: &Step2Objective<'_, '_>, b_init: &[f64], opt_tol: f64, max_iter: usize) -> Result<OptimReport> {
    // Minimising Φ/dx^d makes the Euclidean gradient equal the L² one.
    let scale = 1.0 / obj.prob.grid.cell_volume();
    let mut report = optim::minimize(
        |b| obj.evaluate(b).map(|(v, g)| (v * scale, g)),
        b_init,
        &optim::Options { opt_tol, max_iter },
    )?;
    report.objective /= scale;
    report.objective_history.iter_mut().for_each(|v| *v /= scale);
    Ok(report)
}

fn l2_error(grid: &Grid, b: &[f64], truth: &[f64]) -> f64 {
    let d: Vec<f64> = b.iter().zip(truth).map(|(a, b)| a - b).collect();
    l2_norm(grid, &d)
}

/// Reconstructs `b` by policy iteration from the initial policy `q0` and
/// initial obstacle guess zero.
pub fn policy_iteration_inverse(
    prob: &MfgProblem,
    data: &InverseData,
    q0: &PolicyField,
    opts: &InverseOptions,
    b_true: Option<&[f64]>,
) -> Result<InverseResult> {
    let start = Instant::now();
    let grid = prob.grid;
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidProblem(format!("tolerance must be positive, got {}", opts.tol)));
    }
    if !(opts.gamma >= 0.0) {
        return Err(Error::InvalidProblem(format!("regularisation weight must be nonnegative, got {}", opts.gamma)));
    }
    data.validate(&grid)?;
    if let Some(t) = b_true {
        grid.check_spatial(t, "true obstacle")?;
    }
    if q0.slopes().len() != grid.n_space() * grid.slope_width() * grid.levels() {
        return Err(Error::ShapeMismatch("initial policy does not match the grid".into()));
    }

    let mut q = q0.clone();
    let mut b = vec![0.0; grid.n_space()];
    let mut gaps = Vec::new();
    let mut errors = Vec::new();
    let mut objectives = Vec::new();
    let mut inner = Vec::new();
    let mut gap = f64::INFINITY;

    for k in 1..=opts.max_iter {
        let ops = prob.step_operators(&q);
        let m = solve_fp_with(&ops, &prob.m0)?;
        match data.kind {
            DataKind::TerminalRate => {
                b = closed_form_b_with(prob, &q, &m, &data.g, data.scheme);
                inner.push(0);
            }
            DataKind::InitialValue => {
                let obj = Step2Objective::new(prob, &ops, &m, &data.g, &data.extra, opts.gamma);
                let report = minimize_step2(&obj, &b, opts.opt_tol.at(k), opts.opt_max_iter)?;
                b = report.minimizer;
                inner.push(report.iterations);
            }
        }
        let u = solve_hjb_linear_with(prob, &ops, &m, &b)?;
        drop(ops);
        objectives.push(step_objective(prob, data, &u, &m, &b, opts.gamma));
        if let Some(t) = b_true {
            errors.push(l2_error(&grid, &b, t));
        }
        let next = policy_update(&grid, &u);
        gap = next.gap(&q, &grid);
        gaps.push(gap);
        if !gap.is_finite() {
            break;
        }
        if gap < opts.tol {
            return Ok(InverseResult {
                b,
                u,
                m,
                q,
                iterations: k,
                policy_gap_history: gaps,
                b_error_history: errors,
                objective_history: objectives,
                inner_iterations: inner,
                wall_time_seconds: start.elapsed().as_secs_f64(),
            });
        }
        q = next;
    }
    Err(Error::NotConverged { what: "inverse policy iteration", iterations: gaps.len(), last: gap })
}

/// Data misfit of the state produced in step (ii).
fn step_objective(prob: &MfgProblem, data: &InverseData, u: &ScalarField, m: &ScalarField, b: &[f64], gamma: f64) -> f64 {
    let grid = &prob.grid;
    let pred = crate::forward::measure(prob, u, m, b, data.kind, data.scheme);
    let r: Vec<f64> = pred.iter().zip(&data.g).map(|(a, b)| a - b).collect();
    let mut value = 0.5 * l2_norm(grid, &r).powi(2);
    for o in &data.extra {
        let r: Vec<f64> = u.level(o.level).iter().zip(&o.g).map(|(a, b)| a - b).collect();
        value += 0.5 * l2_norm(grid, &r).powi(2);
    }
    if data.kind == DataKind::InitialValue && gamma > 0.0 {
        value += 0.5 * gamma * gradient_energy(grid, b);
    }
    value
}

//! Direct least squares: minimise the data misfit over `b` with the full
//! nonlinear MFG as constraint.
//!
//! Every objective evaluation runs forward policy iteration to `fwd_tol`;
//! every gradient solves the coupled forward–backward adjoint system
//! linearised at the converged state.

use std::time::Instant;

use crate::field::PolicyField;
use crate::forward::{measure, policy_iteration_forward, DataKind, InverseData, MfgSolution, TerminalRateScheme};
use crate::grid::{gradient_energy, l2_norm, laplacian_apply};
use crate::inverse::InverseResult;
use crate::optim;
use crate::pde::{coupled_adjoint_with, MfgProblem, COUPLED_MAX_ITER};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct DirectOptions {
    pub gamma: f64,
    /// Sup-norm tolerance on the `L²` gradient.
    pub opt_tol: f64,
    /// Policy-gap tolerance of each forward solve.
    pub fwd_tol: f64,
    /// Tolerance of the coupled adjoint alternation.
    pub adj_tol: f64,
    pub max_iter: usize,
    pub fwd_max_iter: usize,
    /// Start each forward solve from the previous converged policy instead
    /// of `q ≡ 0`.
    pub warm_start: bool,
}

impl Default for DirectOptions {
    fn default() -> Self {
        Self {
            gamma: 0.0,
            opt_tol: 1e-10,
            fwd_tol: 1e-9,
            adj_tol: 1e-10,
            max_iter: 1000,
            fwd_max_iter: 500,
            warm_start: true,
        }
    }
}

/// Misfit residuals of a forward solution against the data.
struct Misfit {
    main: Vec<f64>,
    extra: Vec<(usize, Vec<f64>)>,
    value: f64,
}

fn misfit(prob: &MfgProblem, data: &InverseData, sol: &MfgSolution, b: &[f64], gamma: f64) -> Misfit {
    let grid = &prob.grid;
    let pred = measure(prob, &sol.u, &sol.m, b, data.kind, data.scheme);
    let main: Vec<f64> = pred.iter().zip(&data.g).map(|(a, g)| a - g).collect();
    let extra: Vec<(usize, Vec<f64>)> = data
        .extra
        .iter()
        .map(|o| (o.level, sol.u.level(o.level).iter().zip(&o.g).map(|(a, g)| a - g).collect()))
        .collect();
    let mut value = 0.5 * l2_norm(grid, &main).powi(2);
    for (_, r) in &extra {
        value += 0.5 * l2_norm(grid, r).powi(2);
    }
    if gamma > 0.0 {
        value += 0.5 * gamma * gradient_energy(grid, b);
    }
    Misfit { main, extra, value }
}

/// `L²` gradient of the misfit at a converged forward solution.
fn gradient_at(
    prob: &MfgProblem,
    data: &InverseData,
    sol: &MfgSolution,
    b: &[f64],
    mis: &Misfit,
    gamma: f64,
    adj_tol: f64,
) -> Result<Vec<f64>> {
    let grid = &prob.grid;
    let n_space = grid.n_space();
    let nt = grid.time_steps();
    let q = PolicyField::from_value(grid, &sol.u);
    let ops = prob.step_operators(&q);

    let mut injections = Vec::new();
    let mut v_term = vec![0.0; n_space];
    let mut direct = vec![0.0; n_space];
    match (data.kind, data.scheme) {
        (DataKind::InitialValue, _) => {
            injections.push((0, mis.main.clone()));
            injections.extend(mis.extra.iter().cloned());
        }
        (DataKind::TerminalRate, TerminalRateScheme::EquationResidual) => {
            // 𝒢u = const − b − F(m^N)
            let mt = sol.m.last();
            for i in 0..n_space {
                v_term[i] = -mis.main[i] * prob.coupling.derivative(mt[i]);
                direct[i] = -mis.main[i];
            }
        }
        (DataKind::TerminalRate, TerminalRateScheme::BackwardDifference) => {
            // 𝒢u = (u_T − u^{N−1}) / dt
            let inv = 1.0 / grid.dt();
            injections.push((nt - 1, mis.main.iter().map(|r| -r * inv).collect()));
        }
    }
    let adj = coupled_adjoint_with(prob, &ops, &sol.m, &injections, &v_term, adj_tol, COUPLED_MAX_ITER)?;
    let mut grad = adj.w.time_integral(grid);
    grad.iter_mut().zip(&direct).for_each(|(g, d)| *g += d);
    if gamma > 0.0 {
        let lap = laplacian_apply(grid, b);
        grad.iter_mut().zip(&lap).for_each(|(g, l)| *g -= gamma * l);
    }
    Ok(grad)
}

fn check_inputs(prob: &MfgProblem, b: &[f64], data: &InverseData, gamma: f64) -> Result<()> {
    prob.grid.check_spatial(b, "obstacle")?;
    data.validate(&prob.grid)?;
    if !(gamma >= 0.0) {
        return Err(Error::InvalidProblem(format!("regularisation weight must be nonnegative, got {gamma}")));
    }
    Ok(())
}

/// `½‖𝒢u − g‖² (+ extra observations) + γ/2 ‖∇_h b‖²` with `u` from a
/// cold-started forward solve.
pub fn objective_direct(prob: &MfgProblem, b: &[f64], data: &InverseData, gamma: f64, fwd_tol: f64) -> Result<f64> {
    check_inputs(prob, b, data, gamma)?;
    let sol = policy_iteration_forward(prob, b, &PolicyField::zeros(&prob.grid), fwd_tol, DirectOptions::default().fwd_max_iter)?;
    Ok(misfit(prob, data, &sol, b, gamma).value)
}

/// `L²` gradient of [`objective_direct`] by the coupled adjoint.
pub fn gradient_direct(
    prob: &MfgProblem,
    b: &[f64],
    data: &InverseData,
    gamma: f64,
    fwd_tol: f64,
    adj_tol: f64,
) -> Result<Vec<f64>> {
    check_inputs(prob, b, data, gamma)?;
    let sol = policy_iteration_forward(prob, b, &PolicyField::zeros(&prob.grid), fwd_tol, DirectOptions::default().fwd_max_iter)?;
    let mis = misfit(prob, data, &sol, b, gamma);
    gradient_at(prob, data, &sol, b, &mis, gamma, adj_tol)
}

/// Quasi-Newton minimisation of the direct misfit from `b0`.
pub fn direct_ls_solve(
    prob: &MfgProblem,
    data: &InverseData,
    b0: &[f64],
    opts: &DirectOptions,
    b_true: Option<&[f64]>,
) -> Result<InverseResult> {
    let start = Instant::now();
    check_inputs(prob, b0, data, opts.gamma)?;
    if !(opts.opt_tol > 0.0) {
        return Err(Error::InvalidProblem(format!("optimality tolerance must be positive, got {}", opts.opt_tol)));
    }
    let grid = prob.grid;
    let cold = PolicyField::zeros(&grid);
    let scale = 1.0 / grid.cell_volume();

    // (b, final forward gap) of every evaluation since the last accepted step
    let mut probes: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut warm = cold.clone();
    let mut gaps = Vec::new();
    let mut errors = Vec::new();
    let mut objectives = Vec::new();

    let evaluate = |b: &[f64], warm: &mut PolicyField, probes: &mut Vec<(Vec<f64>, f64)>| -> Result<(f64, Vec<f64>)> {
        let q0 = if opts.warm_start { &*warm } else { &cold };
        let sol = policy_iteration_forward(prob, b, q0, opts.fwd_tol, opts.fwd_max_iter)?;
        let mis = misfit(prob, data, &sol, b, opts.gamma);
        let grad = gradient_at(prob, data, &sol, b, &mis, opts.gamma, opts.adj_tol)?;
        probes.push((b.to_vec(), *sol.policy_gap_history.last().unwrap_or(&0.0)));
        if opts.warm_start {
            *warm = sol.q;
        }
        Ok((mis.value * scale, grad))
    };

    let report = {
        let probes_cell = std::cell::RefCell::new(&mut probes);
        let warm_cell = std::cell::RefCell::new(&mut warm);
        optim::minimize_observed(
            |b| evaluate(b, &mut warm_cell.borrow_mut(), &mut probes_cell.borrow_mut()),
            b0,
            &optim::Options { opt_tol: opts.opt_tol, max_iter: opts.max_iter },
            |_, x, f| {
                let mut p = probes_cell.borrow_mut();
                let gap = p.iter().rev().find(|(b, _)| b.as_slice() == x).map_or(f64::NAN, |(_, g)| *g);
                p.clear();
                gaps.push(gap);
                objectives.push(f / scale);
                if let Some(t) = b_true {
                    let d: Vec<f64> = x.iter().zip(t).map(|(a, b)| a - b).collect();
                    errors.push(l2_norm(&grid, &d));
                }
            },
        )?
    };

    let b = report.minimizer;
    let q0 = if opts.warm_start { &warm } else { &cold };
    let sol = policy_iteration_forward(prob, &b, q0, opts.fwd_tol, opts.fwd_max_iter)?;
    Ok(InverseResult {
        b,
        u: sol.u,
        m: sol.m,
        q: sol.q,
        iterations: report.iterations,
        policy_gap_history: gaps,
        b_error_history: errors,
        objective_history: objectives,
        inner_iterations: vec![report.function_evals],
        wall_time_seconds: start.elapsed().as_secs_f64(),
    })
}

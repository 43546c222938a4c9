//! Forward MFG by policy iteration, and synthetic observations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::field::{PolicyField, ScalarField};
use crate::grid::{eo_hamiltonian, l2_norm, laplacian_apply, one_sided_gradients, Grid};
use crate::pde::{solve_fp_with, solve_hjb_linear_with, MfgProblem};
use crate::{Error, Result};

/// Tolerance of the forward solve behind synthetic data.
pub const DATA_TOL: f64 = 1e-12;
pub const DATA_MAX_ITER: usize = 500;

/// Converged forward policy iteration.
///
/// `u` and `m` solve the linear HJB/FP pair for the frozen policy `q`;
/// `∇_h u` differs from `q` by the last entry of `policy_gap_history`.
#[derive(Debug, Clone)]
pub struct MfgSolution {
    pub u: ScalarField,
    pub m: ScalarField,
    pub q: PolicyField,
    pub iterations: usize,
    pub policy_gap_history: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DataKind {
    /// `𝒢u = u(·,0)`
    InitialValue,
    /// `𝒢u = ∂ₜu(·,T)`
    TerminalRate,
}

/// Discretisation of `∂ₜu(·,T)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum TerminalRateScheme {
    /// The HJB right-hand side at `T`: `−εΔ_h u_T + Ĥ(∇_h u_T) − b − F(m(·,T))`.
    #[default]
    EquationResidual,
    /// `(u^N − u^{N−1}) / dt`.
    BackwardDifference,
}

/// Extra `u(·, t_n)` observation used alongside `u(·,0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub level: usize,
    pub g: Vec<f64>,
    pub clean: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InverseData {
    pub kind: DataKind,
    pub scheme: TerminalRateScheme,
    pub g: Vec<f64>,
    pub noise_level: f64,
    pub rng_seed: u64,
    /// Noise-free measurement, when the data are synthetic.
    pub clean: Option<Vec<f64>>,
    pub extra: Vec<Observation>,
}

impl InverseData {
    /// Wraps measured values without noise bookkeeping.
    pub fn new(kind: DataKind, g: Vec<f64>) -> Self {
        Self {
            kind,
            scheme: TerminalRateScheme::default(),
            g,
            noise_level: 0.0,
            rng_seed: 0,
            clean: None,
            extra: Vec::new(),
        }
    }

    pub(crate) fn validate(&self, grid: &Grid) -> Result<()> {
        grid.check_spatial(&self.g, "observation")?;
        if self.g.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("observation contains non-finite values".into()));
        }
        for obs in &self.extra {
            if self.kind != DataKind::InitialValue {
                return Err(Error::InvalidData("extra observations require initial-value data".into()));
            }
            if obs.level == 0 || obs.level >= grid.time_steps() {
                return Err(Error::InvalidData(format!("observation level {} is not interior", obs.level)));
            }
            grid.check_spatial(&obs.g, "extra observation")?;
            if obs.g.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidData("extra observation contains non-finite values".into()));
            }
        }
        Ok(())
    }
}

/// Options for synthetic data generation.
#[derive(Debug, Clone)]
pub struct DataOptions {
    pub kind: DataKind,
    pub scheme: TerminalRateScheme,
    pub noise_level: f64,
    pub seed: u64,
    /// Extra observation times in `(0, T)`, initial-value data only.
    pub extra_times: Vec<f64>,
    pub tol: f64,
    pub max_iter: usize,
}

impl DataOptions {
    pub fn new(kind: DataKind) -> Self {
        Self {
            kind,
            scheme: TerminalRateScheme::default(),
            noise_level: 0.0,
            seed: 0,
            extra_times: Vec::new(),
            tol: DATA_TOL,
            max_iter: DATA_MAX_ITER,
        }
    }
}

/// Solves the forward MFG with obstacle `b` by policy iteration from `q0`,
/// stopping once `max_n ‖q^{(k+1)}(·,t_n) − q^{(k)}(·,t_n)‖ < tol`.
pub fn policy_iteration_forward(
    prob: &MfgProblem,
    b: &[f64],
    q0: &PolicyField,
    tol: f64,
    max_iter: usize,
) -> Result<MfgSolution> {
    if !(tol > 0.0) {
        return Err(Error::InvalidProblem(format!("tolerance must be positive, got {tol}")));
    }
    prob.grid.check_spatial(b, "obstacle")?;
    let grid = prob.grid;
    let mut q = q0.clone();
    let mut history = Vec::new();
    let mut gap = f64::INFINITY;
    for k in 1..=max_iter {
        let ops = prob.step_operators(&q);
        let m = solve_fp_with(&ops, &prob.m0)?;
        let u = solve_hjb_linear_with(prob, &ops, &m, b)?;
        drop(ops);
        let next = PolicyField::from_value(&grid, &u);
        gap = next.gap(&q, &grid);
        history.push(gap);
        if !gap.is_finite() {
            break;
        }
        if gap < tol {
            return Ok(MfgSolution { u, m, q, iterations: k, policy_gap_history: history });
        }
        q = next;
    }
    Err(Error::NotConverged { what: "forward policy iteration", iterations: history.len(), last: gap })
}

/// `−εΔ_h u_T + Ĥ(∇_h u_T) − F(m(·,T))`, the part of the terminal rate
/// that does not involve `b`.
pub(crate) fn terminal_rate_base(prob: &MfgProblem, m_terminal: &[f64]) -> Vec<f64> {
    let grid = &prob.grid;
    let lap = laplacian_apply(grid, &prob.u_terminal);
    let ham = eo_hamiltonian(grid, &one_sided_gradients(grid, &prob.u_terminal));
    lap.iter()
        .zip(&ham)
        .zip(m_terminal)
        .map(|((l, h), m)| -prob.eps * l + h - prob.coupling.value(*m))
        .collect()
}

/// Noise-free measurement `𝒢u` of a state computed with obstacle `b`.
pub fn measure(
    prob: &MfgProblem,
    u: &ScalarField,
    m: &ScalarField,
    b: &[f64],
    kind: DataKind,
    scheme: TerminalRateScheme,
) -> Vec<f64> {
    match (kind, scheme) {
        (DataKind::InitialValue, _) => u.level(0).to_vec(),
        (DataKind::TerminalRate, TerminalRateScheme::EquationResidual) => {
            let mut g = terminal_rate_base(prob, m.last());
            g.iter_mut().zip(b).for_each(|(g, b)| *g -= b);
            g
        }
        (DataKind::TerminalRate, TerminalRateScheme::BackwardDifference) => {
            let nt = prob.grid.time_steps();
            let dt = prob.grid.dt();
            u.level(nt).iter().zip(u.level(nt - 1)).map(|(a, b)| (a - b) / dt).collect()
        }
    }
}

/// Adds i.i.d. Gaussian noise of standard deviation `level·‖clean‖_{L²}`.
fn add_noise(grid: &Grid, clean: &[f64], level: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if level == 0.0 {
        return clean.to_vec();
    }
    let sigma = level * l2_norm(grid, clean);
    clean
        .iter()
        .map(|c| {
            let z: f64 = StandardNormal.sample(rng);
            c + sigma * z
        })
        .collect()
}

/// Level index of an observation time, which must be an interior grid time.
pub fn observation_level(grid: &Grid, t: f64) -> Result<usize> {
    let x = t / grid.dt();
    let n = x.round();
    if !(t > 0.0 && t < grid.horizon()) || (x - n).abs() > 1e-6 {
        return Err(Error::InvalidData(format!(
            "observation time {t} is not an interior time level (dt = {})",
            grid.dt()
        )));
    }
    Ok(n as usize)
}

/// Synthetic observations of the MFG with obstacle `b_true`, with default
/// options and the given noise.
pub fn generate_data(prob: &MfgProblem, b_true: &[f64], kind: DataKind, noise_level: f64, seed: u64) -> Result<InverseData> {
    let opts = DataOptions { noise_level, seed, ..DataOptions::new(kind) };
    generate_data_with(prob, b_true, &opts).map(|(data, _)| data)
}

/// Synthetic observations together with the underlying forward solution.
/// Noise is drawn from a ChaCha8 stream seeded with `opts.seed`, first for
/// the main observation and then for each extra time in order.
pub fn generate_data_with(prob: &MfgProblem, b_true: &[f64], opts: &DataOptions) -> Result<(InverseData, MfgSolution)> {
    if !(opts.noise_level >= 0.0 && opts.noise_level.is_finite()) {
        return Err(Error::InvalidData(format!("noise level must be nonnegative, got {}", opts.noise_level)));
    }
    if !opts.extra_times.is_empty() && opts.kind != DataKind::InitialValue {
        return Err(Error::InvalidData("extra observation times require initial-value data".into()));
    }
    let grid = prob.grid;
    let levels = opts
        .extra_times
        .iter()
        .map(|&t| observation_level(&grid, t))
        .collect::<Result<Vec<_>>>()?;
    let sol = policy_iteration_forward(prob, b_true, &PolicyField::zeros(&grid), opts.tol, opts.max_iter)?;
    let clean = measure(prob, &sol.u, &sol.m, b_true, opts.kind, opts.scheme);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let g = add_noise(&grid, &clean, opts.noise_level, &mut rng);
    let extra = levels
        .into_iter()
        .map(|level| {
            let c = sol.u.level(level).to_vec();
            Observation { level, g: add_noise(&grid, &c, opts.noise_level, &mut rng), clean: Some(c) }
        })
        .collect();
    let data = InverseData {
        kind: opts.kind,
        scheme: opts.scheme,
        g,
        noise_level: opts.noise_level,
        rng_seed: opts.seed,
        clean: Some(clean),
        extra,
    };
    Ok((data, sol))
}

/// Residuals of the discrete MFG relations, each in the `L²(Q)` norm of
/// the per-step equation divided by `dt`.
#[derive(Debug, Clone, Copy)]
pub struct MfgResidual {
    /// `B_nᵀ m^{n+1} − m^n` with the frozen policy.
    pub fp: f64,
    /// Linear HJB step with the frozen policy.
    pub hjb: f64,
    /// Fully nonlinear HJB step with `∇_h u` in place of the policy.
    pub hjb_nonlinear: f64,
    /// `max_n ‖q^n − ∇_h u^n‖`.
    pub policy: f64,
}

/// Evaluates the discrete MFG relations at `(u, m, q)` with obstacle `b`.
pub fn mfg_residual(prob: &MfgProblem, b: &[f64], u: &ScalarField, m: &ScalarField, q: &PolicyField) -> MfgResidual {
    let grid = &prob.grid;
    let dt = grid.dt();
    let w = grid.cell_volume() * dt;
    let (mut fp, mut hjb, mut hjb_nl) = (0.0, 0.0, 0.0);
    for n in 0..grid.time_steps() {
        let ql = q.level(n);
        let (un, un1) = (u.level(n), u.level(n + 1));
        let (mn, mn1) = (m.level(n), m.level(n + 1));

        // FP: m^{n+1} − m^n − dt(εΔm^{n+1} + Div[q^n] m^{n+1})
        let lap_m = laplacian_apply(grid, mn1);
        let div = crate::grid::divergence_conservative(grid, mn1, ql);
        for i in 0..mn.len() {
            let r = (mn1[i] - mn[i]) / dt - prob.eps * lap_m[i] - div[i];
            fp += r * r;
        }

        let lap_u = laplacian_apply(grid, un);
        let adv = crate::grid::advection_apply(grid, ql, un);
        let lag = eo_hamiltonian(grid, ql);
        let ham = eo_hamiltonian(grid, &one_sided_gradients(grid, un));
        for i in 0..un.len() {
            let rest = un1[i] / dt + b[i] + prob.coupling.value(mn[i]);
            let r = un[i] / dt - prob.eps * lap_u[i] + adv[i] - lag[i] - rest;
            hjb += r * r;
            let r = un[i] / dt - prob.eps * lap_u[i] + ham[i] - rest;
            hjb_nl += r * r;
        }
    }
    let policy = PolicyField::from_value(grid, u).gap(q, grid);
    MfgResidual { fp: (fp * w).sqrt(), hjb: (hjb * w).sqrt(), hjb_nonlinear: (hjb_nl * w).sqrt(), policy }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use crate::pde::Coupling;

    fn bump_problem(n: usize) -> MfgProblem {
        let g = make_grid(1, n, 20, 1.0).unwrap();
        let m0 = g.sample(|x| (-20.0 * (x[0] - 0.5).powi(2)).exp());
        let ut: Vec<f64> = m0.iter().map(|v| -0.2 * v).collect();
        MfgProblem::new(g, 0.3, m0, ut, Coupling::Power(2.0)).unwrap()
    }

    #[test]
    fn symmetric_problem_converges_in_one_iteration() {
        let g = make_grid(1, 10, 8, 1.0).unwrap();
        let p = MfgProblem::new(g, 0.3, vec![1.0; 10], vec![0.0; 10], Coupling::Power(2.0)).unwrap();
        let sol = policy_iteration_forward(&p, &[0.0; 10], &PolicyField::zeros(&g), 1e-9, 10).unwrap();
        assert_eq!(sol.iterations, 1);
        assert!(sol.q.slopes().iter().all(|&v| v == 0.0));
        assert!(sol.m.values().iter().all(|&v| (v - 1.0).abs() < 1e-14));
        // u^n = (N − n) dt F(1)
        for n in 0..=8 {
            let expect = (8 - n) as f64 * g.dt();
            assert!(sol.u.level(n).iter().all(|&v| (v - expect).abs() < 1e-13));
        }
    }

    #[test]
    fn forward_residual_is_small() {
        let p = bump_problem(24);
        let b = p.grid.sample(|x| (2.0 * std::f64::consts::PI * x[0]).cos());
        let tol = 1e-10;
        let sol = policy_iteration_forward(&p, &b, &PolicyField::zeros(&p.grid), tol, 100).unwrap();
        assert!(*sol.policy_gap_history.last().unwrap() < tol);
        let r = mfg_residual(&p, &b, &sol.u, &sol.m, &sol.q);
        assert!(r.fp < 10.0 * tol && r.hjb < 10.0 * tol && r.policy < tol, "{r:?}");
        assert!(r.hjb_nonlinear < 10.0 * tol, "{r:?}");
    }

    #[test]
    fn max_iter_reports_gap() {
        let p = bump_problem(16);
        let b = vec![0.0; 16];
        match policy_iteration_forward(&p, &b, &PolicyField::zeros(&p.grid), 1e-14, 2) {
            Err(Error::NotConverged { iterations: 2, last, .. }) => assert!(last > 0.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn noiseless_data_is_clean_and_seed_free() {
        let p = bump_problem(16);
        let b = vec![0.1; 16];
        let a = generate_data(&p, &b, DataKind::TerminalRate, 0.0, 1).unwrap();
        let c = generate_data(&p, &b, DataKind::TerminalRate, 0.0, 99).unwrap();
        assert_eq!(a.g, c.g);
        assert_eq!(Some(&a.g), a.clean.as_ref());
    }

    #[test]
    fn noisy_data_is_deterministic() {
        let p = bump_problem(16);
        let b = vec![0.1; 16];
        let a = generate_data(&p, &b, DataKind::InitialValue, 0.05, 7).unwrap();
        let c = generate_data(&p, &b, DataKind::InitialValue, 0.05, 7).unwrap();
        let d = generate_data(&p, &b, DataKind::InitialValue, 0.05, 8).unwrap();
        assert_eq!(a.g, c.g);
        assert_ne!(a.g, d.g);
    }

    #[test]
    fn schemes_agree_to_first_order() {
        // the two terminal-rate discretisations differ by O(dt), with a
        // sizeable pre-asymptotic constant
        let mut diffs = Vec::new();
        for nt in [20, 40, 80] {
            let g = make_grid(1, 16, nt, 1.0).unwrap();
            let m0 = g.sample(|x| 1.0 + 0.3 * (2.0 * std::f64::consts::PI * x[0]).sin());
            let ut = g.sample(|x| 0.1 * (2.0 * std::f64::consts::PI * x[0]).cos());
            let p = MfgProblem::new(g, 0.3, m0, ut, Coupling::Power(2.0)).unwrap();
            let b = vec![0.0; 16];
            let sol = policy_iteration_forward(&p, &b, &PolicyField::zeros(&g), 1e-12, 100).unwrap();
            let eq = measure(&p, &sol.u, &sol.m, &b, DataKind::TerminalRate, TerminalRateScheme::EquationResidual);
            let bd = measure(&p, &sol.u, &sol.m, &b, DataKind::TerminalRate, TerminalRateScheme::BackwardDifference);
            let d: Vec<f64> = eq.iter().zip(&bd).map(|(a, b)| a - b).collect();
            diffs.push(l2_norm(&g, &d));
        }
        assert!(diffs[0] / diffs[1] > 1.4 && diffs[1] / diffs[2] > diffs[0] / diffs[1], "{diffs:?}");
    }

    #[test]
    fn observation_levels() {
        let g = make_grid(1, 8, 10, 1.0).unwrap();
        assert_eq!(observation_level(&g, 0.2).unwrap(), 2);
        assert!(observation_level(&g, 0.25).is_err());
        assert!(observation_level(&g, 1.0).is_err());
        assert!(observation_level(&g, 0.0).is_err());
    }
}

//! Time-marching solvers: the linear Fokker–Planck equation (forward), the
//! linear HJB equation for a frozen policy (backward), and the adjoint
//! systems used for gradients.
//!
//! All sweeps share the same implicit-Euler step operators. With
//! `B_n = Id + dt(−εΔ_h + Adv_h[q^n])`:
//!
//! * FP: `B_nᵀ m^{n+1} = m^n`
//! * HJB: `B_n u^n = u^{n+1} + dt (L_h(q^n) + b + F(m^n))`
//!
//! The coupled adjoint is the exact transpose of the linearised discrete
//! MFG system around a converged state, so the gradients it produces agree
//! with finite differences of the discrete objective.

use crate::field::{PolicyField, ScalarField};
use crate::grid::{eo_point, integrate, Grid};
use crate::sparse::StepOperators;
use crate::{Error, Result};

/// Congestion cost `F(m)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Coupling {
    /// `F(m) = m^α`.
    Power(f64),
    /// `F ≡ 0`.
    Off,
}

impl Coupling {
    #[inline]
    pub fn value(&self, m: f64) -> f64 {
        match *self {
            Coupling::Power(2.0) => m * m,
            Coupling::Power(a) => m.max(0.0).powf(a),
            Coupling::Off => 0.0,
        }
    }

    #[inline]
    pub fn derivative(&self, m: f64) -> f64 {
        match *self {
            Coupling::Power(2.0) => 2.0 * m,
            Coupling::Power(1.0) => 1.0,
            Coupling::Power(a) => a * m.max(0.0).powf(a - 1.0),
            Coupling::Off => 0.0,
        }
    }
}

/// Forward MFG data with the quadratic Hamiltonian `H(p) = |p|²/2`.
#[derive(Debug, Clone)]
pub struct MfgProblem {
    pub grid: Grid,
    pub eps: f64,
    pub m0: Vec<f64>,
    pub u_terminal: Vec<f64>,
    pub coupling: Coupling,
}

impl MfgProblem {
    /// Validates the data and rescales `m0` to unit mass.
    pub fn new(grid: Grid, eps: f64, m0: Vec<f64>, u_terminal: Vec<f64>, coupling: Coupling) -> Result<Self> {
        if !(eps.is_finite() && eps > 0.0) {
            return Err(Error::InvalidProblem(format!("diffusion must be positive, got {eps}")));
        }
        grid.check_spatial(&m0, "initial density")?;
        grid.check_spatial(&u_terminal, "terminal cost")?;
        if m0.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidProblem("initial density must be finite and nonnegative".into()));
        }
        if u_terminal.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidProblem("terminal cost must be finite".into()));
        }
        if let Coupling::Power(a) = coupling {
            if !(a.is_finite() && a > 0.0) {
                return Err(Error::InvalidProblem(format!("coupling exponent must be positive, got {a}")));
            }
        }
        let mass = integrate(&grid, &m0);
        if !(mass > 0.0) {
            return Err(Error::InvalidProblem("initial density has zero mass".into()));
        }
        let m0 = m0.into_iter().map(|v| v / mass).collect();
        Ok(Self { grid, eps, m0, u_terminal, coupling })
    }

    pub fn step_operators<'a>(&self, q: &'a PolicyField) -> StepOperators<'a> {
        StepOperators::new(&self.grid, q, self.eps)
    }

    fn check_policy(&self, q: &PolicyField) -> Result<()> {
        let expect = PolicyField::zeros(&self.grid);
        if q.slopes().len() != expect.slopes().len() {
            return Err(Error::ShapeMismatch(format!(
                "policy has {} entries, expected {}",
                q.slopes().len(),
                expect.slopes().len()
            )));
        }
        if !q.is_finite() {
            return Err(Error::InvalidProblem("policy has non-finite entries".into()));
        }
        Ok(())
    }

    fn check_scalar(&self, f: &ScalarField, what: &str) -> Result<()> {
        if f.n_space() != self.grid.n_space() || f.levels() != self.grid.levels() {
            return Err(Error::ShapeMismatch(format!("{what} does not match the grid")));
        }
        Ok(())
    }
}

/// Forward sweep `B_nᵀ f^{n+1} = f^n + extra(n)` from `f^0 = init`.
pub(crate) fn forward_sweep(
    ops: &StepOperators<'_>,
    init: &[f64],
    mut extra: impl FnMut(usize, &mut [f64]),
) -> Result<ScalarField> {
    let grid = *ops.grid();
    let mut out = ScalarField::zeros(&grid);
    out.level_mut(0).copy_from_slice(init);
    for n in 0..grid.time_steps() {
        let mut rhs = out.level(n).to_vec();
        extra(n, &mut rhs);
        let next = ops.fp_solve(n, &rhs)?;
        out.level_mut(n + 1).copy_from_slice(&next);
    }
    Ok(out)
}

/// Backward sweep `B_n f^n = f^{n+1} + dt·source(n)` from `f^N = terminal`.
pub(crate) fn backward_sweep(
    ops: &StepOperators<'_>,
    terminal: &[f64],
    mut source: impl FnMut(usize, &mut [f64]),
) -> Result<ScalarField> {
    let grid = *ops.grid();
    let dt = grid.dt();
    let n_space = grid.n_space();
    let mut out = ScalarField::zeros(&grid);
    let last = grid.time_steps();
    out.level_mut(last).copy_from_slice(terminal);
    let mut s = vec![0.0; n_space];
    for n in (0..last).rev() {
        s.iter_mut().for_each(|v| *v = 0.0);
        source(n, &mut s);
        let rhs: Vec<f64> = out.level(n + 1).iter().zip(&s).map(|(u, s)| u + dt * s).collect();
        let cur = ops.hjb_solve(n, &rhs)?;
        out.level_mut(n).copy_from_slice(&cur);
    }
    Ok(out)
}

/// Density `m` for a frozen policy, started from `m0`.
pub fn solve_fp(prob: &MfgProblem, q: &PolicyField) -> Result<ScalarField> {
    prob.check_policy(q)?;
    solve_fp_with(&prob.step_operators(q), &prob.m0)
}

pub fn solve_fp_with(ops: &StepOperators<'_>, m0: &[f64]) -> Result<ScalarField> {
    forward_sweep(ops, m0, |_, _| {})
}

/// Running source `L_h(q^n) + b + F(m^n)` of the linear HJB at level `n`.
pub(crate) fn hjb_source(prob: &MfgProblem, q: &PolicyField, m: &ScalarField, b: &[f64], n: usize, out: &mut [f64]) {
    let w = prob.grid.slope_width();
    let d = prob.grid.dim();
    let ql = q.level(n);
    let ml = m.level(n);
    for (i, o) in out.iter_mut().enumerate() {
        *o += eo_point(&ql[i * w..(i + 1) * w], d) + b[i] + prob.coupling.value(ml[i]);
    }
}

/// Value function of the linear HJB for a frozen policy `q` and density `m`.
pub fn solve_hjb_linear(prob: &MfgProblem, q: &PolicyField, m: &ScalarField, b: &[f64]) -> Result<ScalarField> {
    prob.check_policy(q)?;
    prob.check_scalar(m, "density")?;
    prob.grid.check_spatial(b, "obstacle")?;
    solve_hjb_linear_with(prob, &prob.step_operators(q), m, b)
}

pub fn solve_hjb_linear_with(
    prob: &MfgProblem,
    ops: &StepOperators<'_>,
    m: &ScalarField,
    b: &[f64],
) -> Result<ScalarField> {
    let q = ops.policy();
    backward_sweep(ops, &prob.u_terminal, |n, s| hjb_source(prob, q, m, b, n, s))
}

/// Adjoint of the linear HJB: the FP operator applied to `w0`, without
/// normalisation.
pub fn solve_adjoint_w(prob: &MfgProblem, q: &PolicyField, w0: &[f64]) -> Result<ScalarField> {
    prob.check_policy(q)?;
    prob.grid.check_spatial(w0, "adjoint initial data")?;
    forward_sweep(&prob.step_operators(q), w0, |_, _| {})
}

/// `K[m, q] v = Σ_k D⁻_kᵀ(θ⁻ m D⁻_k v) + D⁺_kᵀ(θ⁺ m D⁺_k v)`, the derivative
/// of the FP transport `Adv[q]ᵀ m` with respect to the value function.
/// `θ⁻ = 1[q⁻ > 0]`, `θ⁺ = 1[q⁺ < 0]` pick the active upwind sides.
pub(crate) fn transport_sensitivity(grid: &Grid, q: &[f64], m: &[f64], v: &[f64]) -> Vec<f64> {
    let d = grid.dim();
    let inv = 1.0 / grid.dx();
    let mut out = vec![0.0; v.len()];
    for i in 0..v.len() {
        let s = &q[i * 2 * d..(i + 1) * 2 * d];
        for k in 0..d {
            if s[k] > 0.0 {
                let p = grid.prev(i, k);
                let a = m[i] * (v[i] - v[p]) * inv * inv;
                out[i] += a;
                out[p] -= a;
            }
            if s[d + k] < 0.0 {
                let nx = grid.next(i, k);
                let a = m[i] * (v[nx] - v[i]) * inv * inv;
                out[nx] += a;
                out[i] -= a;
            }
        }
    }
    out
}

/// Converged pair of the coupled adjoint system.
#[derive(Debug, Clone)]
pub struct CoupledAdjoint {
    pub w: ScalarField,
    pub v: ScalarField,
    pub iterations: usize,
    pub last_change: f64,
}

pub const COUPLED_MAX_ITER: usize = 200;

/// Solves the coupled adjoint of the discrete MFG around `(u, m)`:
///
/// * `w` forward: `B_nᵀ w^{n+1} = w^n + r_n − dt K[m^{n+1}, q^n] v^n`
/// * `v` backward: `B_n v^n = v^{n+1} + dt F′(m^{n+1}) w^{n+2}`
///
/// with `q = ∇_h u`, `w^0 = w_init`, `v^N = v_term`, and `w^{N+1} = 0`.
/// Alternates the two sweeps from `v ≡ 0` until the `L²(Q)` change of
/// `(w, v)` drops below `tol`.
pub fn solve_coupled_adjoint(
    prob: &MfgProblem,
    u: &ScalarField,
    m: &ScalarField,
    w_init: &[f64],
    v_term: &[f64],
    tol: f64,
) -> Result<CoupledAdjoint> {
    prob.check_scalar(u, "value function")?;
    let q = PolicyField::from_value(&prob.grid, u);
    let ops = prob.step_operators(&q);
    coupled_adjoint_with(prob, &ops, m, &[(0, w_init.to_vec())], v_term, tol, COUPLED_MAX_ITER)
}

/// Generalisation of [`solve_coupled_adjoint`] with misfit injections
/// `r_n` at arbitrary levels; the level-0 injection is the initial value.
pub(crate) fn coupled_adjoint_with(
    prob: &MfgProblem,
    ops: &StepOperators<'_>,
    m: &ScalarField,
    injections: &[(usize, Vec<f64>)],
    v_term: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<CoupledAdjoint> {
    let grid = prob.grid;
    prob.check_scalar(m, "density")?;
    grid.check_spatial(v_term, "adjoint terminal data")?;
    if !(tol > 0.0) {
        return Err(Error::InvalidProblem(format!("tolerance must be positive, got {tol}")));
    }
    let nt = grid.time_steps();
    let dt = grid.dt();
    let q = ops.policy();

    let mut init = vec![0.0; grid.n_space()];
    for (lvl, r) in injections.iter().filter(|(l, _)| *l == 0) {
        debug_assert_eq!(*lvl, 0);
        init.iter_mut().zip(r).for_each(|(a, b)| *a += b);
    }

    let mut w = ScalarField::zeros(&grid);
    let mut v = ScalarField::zeros(&grid);
    let mut change = f64::INFINITY;
    for it in 1..=max_iter {
        let w_new = forward_sweep(ops, &init, |n, rhs| {
            for (lvl, r) in injections {
                if *lvl == n && n > 0 {
                    rhs.iter_mut().zip(r).for_each(|(a, b)| *a += b);
                }
            }
            let k = transport_sensitivity(&grid, q.level(n), m.level(n + 1), v.level(n));
            rhs.iter_mut().zip(&k).for_each(|(a, b)| *a -= dt * b);
        })?;
        let v_new = backward_sweep(ops, v_term, |n, s| {
            if n + 2 <= nt {
                let ml = m.level(n + 1);
                let wl = w_new.level(n + 2);
                for i in 0..s.len() {
                    s[i] += prob.coupling.derivative(ml[i]) * wl[i];
                }
            }
        })?;
        let dw = w_new.l2_distance(&w, &grid);
        let dv = v_new.l2_distance(&v, &grid);
        change = (dw * dw + dv * dv).sqrt();
        w = w_new;
        v = v_new;
        if !change.is_finite() {
            break;
        }
        if change < tol {
            return Ok(CoupledAdjoint { w, v, iterations: it, last_change: change });
        }
    }
    Err(Error::NotConverged { what: "coupled adjoint", iterations: max_iter, last: change })
}

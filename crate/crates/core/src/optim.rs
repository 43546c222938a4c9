//! BFGS minimisation with a strong-Wolfe line search.
//!
//! Dense inverse-Hessian updates are used up to [`DENSE_LIMIT`] variables,
//! limited-memory two-loop updates above that. Termination is on the sup
//! norm of the gradient returned by the callback.

use std::fmt;

use crate::Result;

pub const DENSE_LIMIT: usize = 4096;
pub const LBFGS_MEMORY: usize = 20;

/// Sufficient-decrease constant of the Wolfe conditions.
pub const C1: f64 = 1e-4;
/// Curvature constant of the Wolfe conditions.
pub const C2: f64 = 0.9;

const MAX_LINE_EVALS: usize = 40;
/// Relative slack on the objective for approximate-Wolfe acceptance.
const ROUNDOFF: f64 = 10.0 * f64::EPSILON;

#[derive(Debug, Clone)]
pub struct OptimReport {
    pub minimizer: Vec<f64>,
    pub objective: f64,
    /// Sup norm of the gradient at `minimizer`.
    pub first_order_optimality: f64,
    pub iterations: usize,
    pub function_evals: usize,
    /// Objective at the start point followed by every accepted iterate.
    pub objective_history: Vec<f64>,
}

#[derive(Debug, Clone)]
pub enum OptimFailure {
    LineSearch,
    MaxIterations,
    NonFinite,
}

#[derive(Debug, Clone)]
pub struct OptimError {
    pub kind: OptimFailure,
    /// State at the last accepted iterate.
    pub report: Box<OptimReport>,
}

impl fmt::Display for OptimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let what = match self.kind {
            OptimFailure::LineSearch => "line search failed",
            OptimFailure::MaxIterations => "iteration limit reached",
            OptimFailure::NonFinite => "objective or gradient became non-finite",
        };
        write!(
            f,
            "BFGS {what} after {} iterations (objective {:.6e}, optimality {:.3e})",
            self.report.iterations, self.report.objective, self.report.first_order_optimality
        )
    }
}

impl std::error::Error for OptimError {}

#[derive(Debug, Clone, Copy)]
pub struct Options {
    pub opt_tol: f64,
    pub max_iter: usize,
}

impl Default for Options {
    fn default() -> Self {
        Self { opt_tol: 1e-10, max_iter: 1000 }
    }
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Inverse-Hessian approximation.
enum InverseHessian {
    Dense { n: usize, h: Vec<f64> },
    Limited { scale: f64, pairs: std::collections::VecDeque<(Vec<f64>, Vec<f64>, f64)> },
}

impl InverseHessian {
    fn new(n: usize, scale: f64) -> Self {
        if n <= DENSE_LIMIT {
            let mut h = vec![0.0; n * n];
            for i in 0..n {
                h[i * n + i] = scale;
            }
            Self::Dense { n, h }
        } else {
            Self::Limited { scale, pairs: Default::default() }
        }
    }

    fn direction(&self, g: &[f64]) -> Vec<f64> {
        match self {
            Self::Dense { n, h } => (0..*n).map(|i| -dot(&h[i * n..(i + 1) * n], g)).collect(),
            Self::Limited { scale, pairs } => {
                let mut q = g.to_vec();
                let mut alphas = Vec::with_capacity(pairs.len());
                for (s, y, rho) in pairs.iter().rev() {
                    let a = rho * dot(s, &q);
                    q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
                    alphas.push(a);
                }
                q.iter_mut().for_each(|v| *v *= scale);
                for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
                    let b = rho * dot(y, &q);
                    q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
                }
                q.iter_mut().for_each(|v| *v = -*v);
                q
            }
        }
    }

    /// Rescales the initial approximation to `sᵀy / yᵀy` (first update only).
    fn rescale(&mut self, factor: f64) {
        match self {
            Self::Dense { n, h } => {
                for i in 0..*n {
                    h[i * *n + i] = factor;
                }
            }
            Self::Limited { scale, .. } => *scale = factor,
        }
    }

    fn update(&mut self, s: &[f64], y: &[f64], sy: f64) {
        let rho = 1.0 / sy;
        match self {
            Self::Dense { n, h } => {
                let n = *n;
                // H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ
                let hy: Vec<f64> = (0..n).map(|i| dot(&h[i * n..(i + 1) * n], y)).collect();
                let yhy = dot(y, &hy);
                let c = (1.0 + rho * yhy) * rho;
                for i in 0..n {
                    for j in 0..n {
                        h[i * n + j] += c * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
                    }
                }
            }
            Self::Limited { pairs, scale } => {
                if pairs.len() == LBFGS_MEMORY {
                    pairs.pop_front();
                }
                *scale = sy / dot(y, y);
                pairs.push_back((s.to_vec(), y.to_vec(), rho));
            }
        }
    }
}

struct Point {
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
}

/// Minimises `f` from `x0`. `f` returns the objective and its gradient.
pub fn minimize<F>(f: F, x0: &[f64], opts: &Options) -> Result<OptimReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    minimize_observed(f, x0, opts, |_, _, _| {})
}

/// As [`minimize`], calling `observe(iteration, x, objective)` after every
/// accepted step.
pub fn minimize_observed<F, O>(mut f: F, x0: &[f64], opts: &Options, mut observe: O) -> Result<OptimReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    O: FnMut(usize, &[f64], f64),
{
    let n = x0.len();
    let mut evals = 1;
    let (f0, g0) = f(x0)?;
    let mut cur = Point { x: x0.to_vec(), f: f0, g: g0 };
    let mut history = vec![cur.f];

    let report = |p: &Point, it: usize, evals: usize, hist: &Vec<f64>| OptimReport {
        minimizer: p.x.clone(),
        objective: p.f,
        first_order_optimality: sup_norm(&p.g),
        iterations: it,
        function_evals: evals,
        objective_history: hist.clone(),
    };
    let fail = |kind, p: &Point, it, evals, hist: &Vec<f64>| {
        crate::Error::Optimizer(OptimError { kind, report: Box::new(report(p, it, evals, hist)) })
    };

    if !cur.f.is_finite() || cur.g.iter().any(|v| !v.is_finite()) {
        return Err(fail(OptimFailure::NonFinite, &cur, 0, evals, &history));
    }
    if sup_norm(&cur.g) <= opts.opt_tol {
        return Ok(report(&cur, 0, evals, &history));
    }

    let gnorm = dot(&cur.g, &cur.g).sqrt();
    let mut hess = InverseHessian::new(n, 1.0 / gnorm);
    let mut first_update = true;
    let mut retried = false;

    for it in 1..=opts.max_iter {
        let mut p = hess.direction(&cur.g);
        let mut slope = dot(&p, &cur.g);
        if !(slope < 0.0) {
            let gn = dot(&cur.g, &cur.g).sqrt();
            hess = InverseHessian::new(n, 1.0 / gn);
            first_update = true;
            p = hess.direction(&cur.g);
            slope = dot(&p, &cur.g);
        }

        match line_search(&mut f, &cur, &p, slope, &mut evals)? {
            Some(next) => {
                retried = false;
                let s: Vec<f64> = next.x.iter().zip(&cur.x).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = next.g.iter().zip(&cur.g).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                if sy > 1e-14 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
                    if first_update {
                        hess.rescale(sy / dot(&y, &y));
                        first_update = false;
                    }
                    hess.update(&s, &y, sy);
                }
                cur = next;
                history.push(cur.f);
                observe(it, &cur.x, cur.f);
                if sup_norm(&cur.g) <= opts.opt_tol {
                    return Ok(report(&cur, it, evals, &history));
                }
            }
            None if !retried => {
                // restart from a scaled steepest-descent model once
                retried = true;
                let gn = dot(&cur.g, &cur.g).sqrt();
                hess = InverseHessian::new(n, 1.0 / gn);
                first_update = true;
            }
            None => return Err(fail(OptimFailure::LineSearch, &cur, it - 1, evals, &history)),
        }
    }
    Err(fail(OptimFailure::MaxIterations, &cur, opts.max_iter, evals, &history))
}

/// Minimiser of the cubic interpolating `(a, fa, da)` and `(b, fb, db)`,
/// safeguarded to the interior of the bracket.
fn cubic_step(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> f64 {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let width = hi - lo;
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    let mut t = f64::NAN;
    if disc >= 0.0 {
        let d2 = (b - a).signum() * disc.sqrt();
        t = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2);
    }
    if !t.is_finite() || t <= lo + 0.1 * width || t >= hi - 0.1 * width {
        t = 0.5 * (lo + hi);
    }
    t
}

/// Strong-Wolfe line search (bracketing then zoom). `Ok(None)` signals
/// that no acceptable step was found.
fn line_search<F>(f: &mut F, cur: &Point, p: &[f64], slope0: f64, evals: &mut usize) -> Result<Option<Point>>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut probe = |alpha: f64, evals: &mut usize| -> Result<(Point, f64)> {
        let x: Vec<f64> = cur.x.iter().zip(p).map(|(xi, pi)| xi + alpha * pi).collect();
        *evals += 1;
        let (fx, gx) = f(&x)?;
        let d = dot(&gx, p);
        Ok((Point { x, f: fx, g: gx }, d))
    };
    let armijo = |alpha: f64, fx: f64| fx <= cur.f + C1 * alpha * slope0;
    let curvature = |d: f64| d.abs() <= -C2 * slope0;
    // Hager–Zhang approximate Wolfe: once decreases fall below the
    // resolution of f, the derivative carries the decrease test.
    let approximate =
        |fx: f64, d: f64| fx <= cur.f + ROUNDOFF * cur.f.abs() && C2 * slope0 <= d && d <= (2.0 * C1 - 1.0) * slope0;
    let accept = |alpha: f64, fx: f64, d: f64| (armijo(alpha, fx) && curvature(d)) || approximate(fx, d);
    let finite = |pt: &Point| pt.f.is_finite() && pt.g.iter().all(|v| v.is_finite());

    let (mut a_prev, mut f_prev, mut d_prev) = (0.0, cur.f, slope0);
    let mut alpha = 1.0;
    let mut used = 0;
    let (lo, hi);
    loop {
        if used >= MAX_LINE_EVALS {
            return Ok(None);
        }
        used += 1;
        let (pt, d) = probe(alpha, evals)?;
        if !finite(&pt) {
            // step too long: shrink toward the last good point
            alpha = a_prev + 0.25 * (alpha - a_prev);
            continue;
        }
        if accept(alpha, pt.f, d) {
            return Ok(Some(pt));
        }
        if !armijo(alpha, pt.f) || (used > 1 && pt.f >= f_prev) {
            lo = (a_prev, f_prev, d_prev);
            hi = (alpha, pt.f, d);
            break;
        }
        if d >= 0.0 {
            lo = (alpha, pt.f, d);
            hi = (a_prev, f_prev, d_prev);
            let best = pt;
            return zoom(&mut probe, lo, hi, Some(best), armijo, accept, used, evals);
        }
        let next = if d_prev < 0.0 && d > d_prev {
            // secant extrapolation of the derivative, capped
            let t = alpha - d * (alpha - a_prev) / (d - d_prev);
            t.clamp(1.1 * alpha, 10.0 * alpha)
        } else {
            4.0 * alpha
        };
        a_prev = alpha;
        f_prev = pt.f;
        d_prev = d;
        alpha = next;
    }
    zoom(&mut probe, lo, hi, None, armijo, accept, used, evals)
}

#[allow(clippy::too_many_arguments)]
fn zoom<P, A, C>(
    probe: &mut P,
    mut lo: (f64, f64, f64),
    mut hi: (f64, f64, f64),
    mut best: Option<Point>,
    armijo: A,
    accept: C,
    mut used: usize,
    evals: &mut usize,
) -> Result<Option<Point>>
where
    P: FnMut(f64, &mut usize) -> Result<(Point, f64)>,
    A: Fn(f64, f64) -> bool,
    C: Fn(f64, f64, f64) -> bool,
{
    while used < MAX_LINE_EVALS {
        used += 1;
        let alpha = cubic_step(lo.0, lo.1, lo.2, hi.0, hi.1, hi.2);
        if (hi.0 - lo.0).abs() <= 1e-16 * lo.0.abs().max(1e-300) {
            break;
        }
        let (pt, d) = probe(alpha, evals)?;
        if pt.f.is_finite() && accept(alpha, pt.f, d) {
            return Ok(Some(pt));
        }
        if !pt.f.is_finite() || !armijo(alpha, pt.f) || pt.f >= lo.1 {
            hi = (alpha, pt.f, if d.is_finite() { d } else { f64::MAX });
            continue;
        }
        if d * (hi.0 - lo.0) >= 0.0 {
            hi = lo;
        }
        lo = (alpha, pt.f, d);
        best = Some(pt);
    }
    // accept the best sufficient-decrease point if the bracket collapsed
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        Ok((f, g))
    }

    #[test]
    fn unit_quadratic_in_two_iterations() {
        let a = vec![1.0, -2.0, 3.5, 0.25];
        let r = minimize(
            |x| {
                let g: Vec<f64> = x.iter().zip(&a).map(|(xi, ai)| xi - ai).collect();
                Ok((0.5 * dot(&g, &g), g))
            },
            &[0.0; 4],
            &Options { opt_tol: 1e-10, max_iter: 50 },
        )
        .unwrap();
        assert!(r.iterations <= 2, "{}", r.iterations);
        assert!(r.first_order_optimality <= 1e-10);
        for (x, a) in r.minimizer.iter().zip(&a) {
            assert!((x - a).abs() < 1e-10);
        }
    }

    #[test]
    fn rosenbrock_converges() {
        let r = minimize(rosenbrock, &[-1.2, 1.0], &Options { opt_tol: 1e-8, max_iter: 100 }).unwrap();
        assert!(r.iterations <= 100);
        assert!((r.minimizer[0] - 1.0).abs() < 1e-6 && (r.minimizer[1] - 1.0).abs() < 1e-6);
        for w in r.objective_history.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn optimal_start_returns_immediately() {
        let r = minimize(rosenbrock, &[1.0, 1.0], &Options::default()).unwrap();
        assert_eq!(r.iterations, 0);
        assert_eq!(r.minimizer, vec![1.0, 1.0]);
    }

    #[test]
    fn convex_quadratic_iteration_bound() {
        // f = ½ xᵀAx − bᵀx with a fixed SPD A
        let n = 12;
        let a: Vec<f64> = (0..n * n)
            .map(|k| {
                let (i, j) = (k / n, k % n);
                if i == j { 2.0 + i as f64 } else { 1.0 / (1.0 + (i as f64 - j as f64).abs()) }
            })
            .collect();
        let b: Vec<f64> = (0..n).map(|i| (i as f64).cos()).collect();
        let r = minimize(
            |x| {
                let ax: Vec<f64> = (0..n).map(|i| dot(&a[i * n..(i + 1) * n], x)).collect();
                let g: Vec<f64> = ax.iter().zip(&b).map(|(p, q)| p - q).collect();
                Ok((0.5 * dot(x, &ax) - dot(&b, x), g))
            },
            &vec![0.0; n],
            &Options { opt_tol: 1e-10, max_iter: 200 },
        )
        .unwrap();
        assert!(r.iterations <= 3 * n, "{}", r.iterations);
    }

    #[test]
    fn limited_memory_path() {
        let n = DENSE_LIMIT + 10;
        let r = minimize(
            |x| {
                let g: Vec<f64> = x.iter().enumerate().map(|(i, v)| (1.0 + (i % 3) as f64) * (v - 1.0)).collect();
                let f = x
                    .iter()
                    .enumerate()
                    .map(|(i, v)| 0.5 * (1.0 + (i % 3) as f64) * (v - 1.0).powi(2))
                    .sum();
                Ok((f, g))
            },
            &vec![0.0; n],
            &Options { opt_tol: 1e-9, max_iter: 100 },
        )
        .unwrap();
        assert!(r.minimizer.iter().all(|v| (v - 1.0).abs() < 1e-8));
    }

    #[test]
    fn max_iter_is_reported() {
        let err = minimize(rosenbrock, &[-1.2, 1.0], &Options { opt_tol: 1e-12, max_iter: 3 }).unwrap_err();
        match err {
            crate::Error::Optimizer(OptimError { kind: OptimFailure::MaxIterations, report }) => {
                assert_eq!(report.iterations, 3);
            }
            other => panic!("unexpected {other}"),
        }
    }
}

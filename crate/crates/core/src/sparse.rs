//! Assembly and solution of the sparse systems produced by implicit Euler
//! steps of the Fokker–Planck and linear HJB equations.
//!
//! Both step operators are diagonally dominant M-matrices (the HJB one by
//! rows, the FP one by columns), so Gaussian elimination without pivoting
//! is stable. Factorizations use a variable-band (skyline) layout whose fill
//! stays inside the envelope of the stencil; for periodic grids the envelope
//! is a band of width `I^{d-1}` plus a border from the wraparound entries.

use std::sync::OnceLock;

use crate::grid::{Grid, integrate};
use crate::{Error, Result};

/// Largest system solved by direct factorization. Above this the
/// Jacobi-preconditioned BiCGSTAB fallback is used.
pub const DIRECT_LIMIT: usize = 10_000;

/// Relative residual demanded of every solve.
pub const SOLVE_TOL: f64 = 1e-12;

/// Square matrix in compressed sparse row form with sorted columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOperator {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseOperator {
    /// Builds from `(row, col, value)` triplets, summing duplicates.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(triplets.len());
        let mut vals: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < n && c < n, "triplet ({r},{c}) outside {n}x{n}");
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..n {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self { n, row_ptr, cols, vals }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_triplets(n, (0..n).map(|i| (i, i, 1.0)).collect())
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// `(column, value)` pairs of row `r`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.cols[span.clone()].iter().copied().zip(self.vals[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        match self.cols[span.clone()].binary_search(&c) {
            Ok(k) => self.vals[span.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n).map(|r| self.row(r).map(|(c, v)| v * x[c]).sum()).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Vec::with_capacity(self.nnz());
        for r in 0..self.n {
            t.extend(self.row(r).map(|(c, v)| (c, r, v)));
        }
        Self::from_triplets(self.n, t)
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.n];
        for r in 0..self.n {
            for (c, v) in self.row(r) {
                s[c] += v;
            }
        }
        s
    }

    /// Row-major dense copy, for small diagnostics.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for (r, row) in d.iter_mut().enumerate() {
            for (c, v) in self.row(r) {
                row[c] = v;
            }
        }
        d
    }

    pub fn is_finite(&self) -> bool {
        self.vals.iter().all(|v| v.is_finite())
    }
}

fn laplacian_triplets(grid: &Grid, scale: f64, out: &mut Vec<(usize, usize, f64)>) {
    let s = scale / (grid.dx() * grid.dx());
    for i in 0..grid.n_space() {
        for k in 0..grid.dim() {
            out.push((i, i, -2.0 * s));
            out.push((i, grid.next(i, k), s));
            out.push((i, grid.prev(i, k), s));
        }
    }
}

/// Triplets of `scale · Adv[q]`, the upwind transport of the linear HJB.
fn advection_triplets(grid: &Grid, q: &[f64], scale: f64, out: &mut Vec<(usize, usize, f64)>) {
    let d = grid.dim();
    let s = scale / grid.dx();
    for i in 0..grid.n_space() {
        let slopes = &q[i * 2 * d..(i + 1) * 2 * d];
        for k in 0..d {
            let back = slopes[k].max(0.0) * s;
            let fwd = slopes[d + k].min(0.0) * s;
            out.push((i, i, back - fwd));
            out.push((i, grid.prev(i, k), -back));
            out.push((i, grid.next(i, k), fwd));
        }
    }
}

fn check_step_inputs(grid: &Grid, q_slice: &[f64], eps: f64) -> Result<()> {
    if q_slice.len() != grid.n_space() * grid.slope_width() {
        return Err(Error::ShapeMismatch(format!(
            "policy slice has {} entries, expected {}",
            q_slice.len(),
            grid.n_space() * grid.slope_width()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidProblem(format!("diffusion must be positive, got {eps}")));
    }
    Ok(())
}

/// `A = Id − dt (ε Δ_h + Div_h[q])`, so that `A m^{n+1} = m^n`. Built as
/// the exact transpose of [`assemble_hjb_step`] since `Div_h[q] = −Adv_h[q]ᵀ`.
pub fn assemble_fp_step(grid: &Grid, q_slice: &[f64], eps: f64) -> Result<SparseOperator> {
    Ok(assemble_hjb_step(grid, q_slice, eps)?.transpose())
}

/// `B = Id + dt (−ε Δ_h + Adv_h[q])`, so that `B u^n = u^{n+1} + dt·source`.
pub fn assemble_hjb_step(grid: &Grid, q_slice: &[f64], eps: f64) -> Result<SparseOperator> {
    check_step_inputs(grid, q_slice, eps)?;
    let n = grid.n_space();
    let mut t = Vec::with_capacity(n * (1 + 6 * grid.dim()));
    t.extend((0..n).map(|i| (i, i, 1.0)));
    laplacian_triplets(grid, -grid.dt() * eps, &mut t);
    advection_triplets(grid, q_slice, grid.dt(), &mut t);
    Ok(SparseOperator::from_triplets(n, t))
}

/// LU factors without pivoting in variable-band storage. Row `k` of `L`
/// holds columns `lfirst[k]..k` (unit diagonal implied); column `k` of `U`
/// holds rows `ufirst[k]..=k`.
#[derive(Debug, Clone)]
struct SkylineLu {
    lfirst: Vec<usize>,
    ufirst: Vec<usize>,
    lptr: Vec<usize>,
    uptr: Vec<usize>,
    l: Vec<f64>,
    u: Vec<f64>,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl SkylineLu {
    #[allow(clippy::needless_range_loop)]
    fn factor(op: &SparseOperator) -> Result<Self> {
        let n = op.n;
        let mut lfirst: Vec<usize> = (0..n).collect();
        let mut ufirst: Vec<usize> = (0..n).collect();
        for r in 0..n {
            for (c, _) in op.row(r) {
                if c < r {
                    lfirst[r] = lfirst[r].min(c);
                } else if c > r {
                    ufirst[c] = ufirst[c].min(r);
                }
            }
        }
        let mut lptr = vec![0usize; n + 1];
        let mut uptr = vec![0usize; n + 1];
        for k in 0..n {
            lptr[k + 1] = lptr[k] + (k - lfirst[k]);
            uptr[k + 1] = uptr[k] + (k + 1 - ufirst[k]);
        }
        let mut l = vec![0.0; lptr[n]];
        let mut u = vec![0.0; uptr[n]];
        for r in 0..n {
            for (c, v) in op.row(r) {
                if c < r {
                    l[lptr[r] + c - lfirst[r]] = v;
                } else {
                    u[uptr[c] + r - ufirst[c]] = v;
                }
            }
        }

        for k in 0..n {
            // row k of L
            for j in lfirst[k]..k {
                let p0 = lfirst[k].max(ufirst[j]);
                let lrow = &l[lptr[k] + p0 - lfirst[k]..lptr[k] + j - lfirst[k]];
                let ucol = &u[uptr[j] + p0 - ufirst[j]..uptr[j] + j - ufirst[j]];
                let s = dot(lrow, ucol);
                let pivot = u[uptr[j + 1] - 1];
                let idx = lptr[k] + j - lfirst[k];
                l[idx] = (l[idx] - s) / pivot;
            }
            // column k of U
            for i in ufirst[k]..=k {
                let p0 = lfirst[i].max(ufirst[k]);
                if p0 >= i {
                    continue;
                }
                let lrow = &l[lptr[i] + p0 - lfirst[i]..lptr[i] + i - lfirst[i]];
                let ucol = &u[uptr[k] + p0 - ufirst[k]..uptr[k] + i - ufirst[k]];
                let s = dot(lrow, ucol);
                u[uptr[k] + i - ufirst[k]] -= s;
            }
            let pivot = u[uptr[k + 1] - 1];
            if !pivot.is_finite() || pivot.abs() < 1e-300 {
                return Err(Error::SingularMatrix(format!("zero pivot at row {k}")));
            }
        }
        Ok(Self { lfirst, ufirst, lptr, uptr, l, u })
    }

    fn n(&self) -> usize {
        self.lfirst.len()
    }

    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut y = rhs.to_vec();
        for k in 0..n {
            let f = self.lfirst[k];
            y[k] -= dot(&self.l[self.lptr[k]..self.lptr[k + 1]], &y[f..k]);
        }
        for j in (0..n).rev() {
            let f = self.ufirst[j];
            let col = &self.u[self.uptr[j]..self.uptr[j + 1]];
            y[j] /= col[j - f];
            let xj = y[j];
            for (yi, ui) in y[f..j].iter_mut().zip(&col[..j - f]) {
                *yi -= xj * ui;
            }
        }
        y
    }

    fn solve_transpose(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut z = rhs.to_vec();
        for j in 0..n {
            let f = self.ufirst[j];
            let col = &self.u[self.uptr[j]..self.uptr[j + 1]];
            z[j] = (z[j] - dot(&col[..j - f], &z[f..j])) / col[j - f];
        }
        for i in (0..n).rev() {
            let f = self.lfirst[i];
            let xi = z[i];
            for (zp, lv) in z[f..i].iter_mut().zip(&self.l[self.lptr[i]..self.lptr[i + 1]]) {
                *zp -= xi * lv;
            }
        }
        z
    }
}

/// Jacobi-preconditioned BiCGSTAB for systems above [`DIRECT_LIMIT`].
#[derive(Debug, Clone)]
struct Iterative {
    op: SparseOperator,
    op_t: SparseOperator,
}

fn bicgstab(op: &SparseOperator, rhs: &[f64], tol: f64) -> Result<Vec<f64>> {
    let n = op.n;
    let inv_diag: Vec<f64> = (0..n).map(|i| 1.0 / op.get(i, i)).collect();
    let precond = |v: &[f64]| -> Vec<f64> { v.iter().zip(&inv_diag).map(|(a, d)| a * d).collect() };
    let norm = |v: &[f64]| dot(v, v).sqrt();
    let bnorm = norm(rhs);
    if bnorm == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let mut x = precond(rhs);
    let ax = op.matvec(&x);
    let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    for _ in 0..(10 * n).max(100) {
        if norm(&r) <= tol * bnorm {
            return Ok(x);
        }
        let rho_new = dot(&r_hat, &r);
        if rho_new == 0.0 {
            break;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        let ph = precond(&p);
        v = op.matvec(&ph);
        alpha = rho / dot(&r_hat, &v);
        let s: Vec<f64> = r.iter().zip(&v).map(|(ri, vi)| ri - alpha * vi).collect();
        let sh = precond(&s);
        let t = op.matvec(&sh);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * ph[i] + omega * sh[i];
            r[i] = s[i] - omega * t[i];
        }
        if omega == 0.0 {
            break;
        }
    }
    let res = norm(&r) / bnorm;
    if res <= tol {
        Ok(x)
    } else {
        Err(Error::SingularMatrix(format!("BiCGSTAB stalled at relative residual {res:.3e}")))
    }
}

/// A solver ready for repeated solves with an operator and its transpose.
#[derive(Debug, Clone)]
pub struct Factorization(Inner);

#[derive(Debug, Clone)]
enum Inner {
    Direct(SkylineLu),
    Iterative(Box<Iterative>),
}

impl Factorization {
    pub fn new(op: &SparseOperator) -> Result<Self> {
        if !op.is_finite() {
            return Err(Error::SingularMatrix("operator has non-finite entries".into()));
        }
        if op.n <= DIRECT_LIMIT {
            Ok(Self(Inner::Direct(SkylineLu::factor(op)?)))
        } else {
            Ok(Self(Inner::Iterative(Box::new(Iterative { op_t: op.transpose(), op: op.clone() }))))
        }
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        match &self.0 {
            Inner::Direct(lu) => Ok(lu.solve(rhs)),
            Inner::Iterative(it) => bicgstab(&it.op, rhs, SOLVE_TOL),
        }
    }

    /// Solves with the transposed operator.
    pub fn solve_transpose(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        match &self.0 {
            Inner::Direct(lu) => Ok(lu.solve_transpose(rhs)),
            Inner::Iterative(it) => bicgstab(&it.op_t, rhs, SOLVE_TOL),
        }
    }

    /// Number of stored factor entries (zero for the iterative fallback).
    pub fn stored_entries(&self) -> usize {
        match &self.0 {
            Inner::Direct(lu) => lu.l.len() + lu.u.len(),
            Inner::Iterative(_) => 0,
        }
    }
}

fn relative_residual(op: &SparseOperator, x: &[f64], rhs: &[f64]) -> f64 {
    let ax = op.matvec(x);
    let r: f64 = ax.iter().zip(rhs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let b = dot(rhs, rhs).sqrt();
    if b == 0.0 { r } else { r / b }
}

/// One-off solve of `op · x = rhs`, checked against [`SOLVE_TOL`].
pub fn solve(op: &SparseOperator, rhs: &[f64]) -> Result<Vec<f64>> {
    if rhs.len() != op.n {
        return Err(Error::ShapeMismatch(format!(
            "rhs has {} entries for a {}x{} operator",
            rhs.len(),
            op.n,
            op.n
        )));
    }
    let f = Factorization::new(op)?;
    let mut x = f.solve(rhs)?;
    let mut res = relative_residual(op, &x, rhs);
    if res > SOLVE_TOL {
        // one step of iterative refinement
        let ax = op.matvec(&x);
        let r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let dx = f.solve(&r)?;
        x.iter_mut().zip(&dx).for_each(|(xi, di)| *xi += di);
        res = relative_residual(op, &x, rhs);
    }
    if res > SOLVE_TOL || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularMatrix(format!("relative residual {res:.3e} after refinement")));
    }
    Ok(x)
}

/// Budget for keeping every time level's factorization alive at once.
pub const CACHE_BUDGET_BYTES: usize = 1 << 30;

/// Implicit-Euler HJB step operators `B_n = B(q^n)` for `n = 0..N−1` of
/// one policy. The FP step operators are their transposes, so the same
/// factorizations serve forward (FP, adjoint) and backward (HJB) sweeps.
///
/// Factorizations are computed lazily and kept while the total storage
/// stays within [`CACHE_BUDGET_BYTES`]; above that every request
/// refactors.
pub struct StepOperators<'a> {
    grid: Grid,
    eps: f64,
    q: &'a crate::field::PolicyField,
    cache: Option<Vec<OnceLock<Factorization>>>,
}

impl<'a> StepOperators<'a> {
    pub fn new(grid: &Grid, q: &'a crate::field::PolicyField, eps: f64) -> Self {
        let n = grid.n_space();
        // direct factor storage estimate: band plus wraparound border
        let band = n.div_ceil(grid.points_per_dim()).max(1);
        let per_level = if n <= DIRECT_LIMIT { 2 * n * (2 * band + 2) * 8 } else { 0 };
        let cache = (per_level * grid.time_steps() <= CACHE_BUDGET_BYTES)
            .then(|| (0..grid.time_steps()).map(|_| OnceLock::new()).collect());
        Self { grid: *grid, eps, q, cache }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn policy(&self) -> &crate::field::PolicyField {
        self.q
    }

    pub fn is_cached(&self) -> bool {
        self.cache.is_some()
    }

    fn build(&self, level: usize) -> Result<Factorization> {
        let op = assemble_hjb_step(&self.grid, self.q.level(level), self.eps)?;
        Factorization::new(&op)
    }

    fn with_level<T>(&self, level: usize, f: impl FnOnce(&Factorization) -> Result<T>) -> Result<T> {
        match &self.cache {
            Some(cells) => {
                let cell = &cells[level];
                if let Some(fac) = cell.get() {
                    return f(fac);
                }
                let fac = self.build(level)?;
                f(cell.get_or_init(|| fac))
            }
            None => f(&self.build(level)?),
        }
    }

    /// Solves `B_n x = rhs` (backward HJB step).
    pub fn hjb_solve(&self, level: usize, rhs: &[f64]) -> Result<Vec<f64>> {
        self.with_level(level, |f| f.solve(rhs))
    }

    /// Solves `B_nᵀ x = rhs` (forward FP step from level `n` to `n+1`).
    pub fn fp_solve(&self, level: usize, rhs: &[f64]) -> Result<Vec<f64>> {
        self.with_level(level, |f| f.solve_transpose(rhs))
    }
}

/// Mass of a density slice, exposed for diagnostics.
pub fn mass(grid: &Grid, m: &[f64]) -> f64 {
    integrate(grid, m)
}

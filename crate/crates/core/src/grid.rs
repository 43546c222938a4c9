//! Periodic tensor-product grids on the flat torus and the discrete
//! differential and quadrature operators shared by every solver.
//!
//! Spatial points are stored row-major over dimensions (the last dimension
//! varies fastest) and sit at the left endpoints `x_i = i * dx`. Periodic
//! neighbours are found by modular indexing; there are no ghost cells.
//!
//! A slope slice holds `2 * dim` values per spatial point: first the `dim`
//! backward differences `D⁻_k f`, then the `dim` forward differences `D⁺_k f`.

use crate::{Error, Result};

/// Uniform space-time grid on `[0,1)^d × [0,T]` with periodic space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    dim: usize,
    points_per_dim: usize,
    time_steps: usize,
    horizon: f64,
    dx: f64,
    dt: f64,
}

impl Grid {
    pub fn new(dim: usize, points_per_dim: usize, time_steps: usize, horizon: f64) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(Error::InvalidGrid(format!("dimension must be 1 or 2, got {dim}")));
        }
        if points_per_dim < 4 {
            return Err(Error::InvalidGrid(format!(
                "need at least 4 points per dimension, got {points_per_dim}"
            )));
        }
        if time_steps < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2 time steps, got {time_steps}")));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidGrid(format!("horizon must be positive, got {horizon}")));
        }
        Ok(Self {
            dim,
            points_per_dim,
            time_steps,
            horizon,
            dx: 1.0 / points_per_dim as f64,
            dt: horizon / time_steps as f64,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points_per_dim(&self) -> usize {
        self.points_per_dim
    }

    /// Number of time steps `N`; there are `N + 1` time levels.
    pub fn time_steps(&self) -> usize {
        self.time_steps
    }

    pub fn levels(&self) -> usize {
        self.time_steps + 1
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Total number of spatial points `I^d`.
    pub fn n_space(&self) -> usize {
        self.points_per_dim.pow(self.dim as u32)
    }

    /// Quadrature weight `dx^d` of one spatial cell.
    pub fn cell_volume(&self) -> f64 {
        self.dx.powi(self.dim as i32)
    }

    /// Number of slope components per spatial point (`2d`).
    pub fn slope_width(&self) -> usize {
        2 * self.dim
    }

    pub fn time(&self, level: usize) -> f64 {
        level as f64 * self.dt
    }

    fn stride(&self, axis: usize) -> usize {
        self.points_per_dim.pow((self.dim - 1 - axis) as u32)
    }

    /// Integer coordinate of point `idx` along `axis`.
    pub fn axis_index(&self, idx: usize, axis: usize) -> usize {
        (idx / self.stride(axis)) % self.points_per_dim
    }

    /// Periodic neighbour of `idx` one step forward along `axis`.
    #[inline]
    pub fn next(&self, idx: usize, axis: usize) -> usize {
        let s = self.stride(axis);
        if self.axis_index(idx, axis) + 1 == self.points_per_dim {
            idx + s - self.points_per_dim * s
        } else {
            idx + s
        }
    }

    /// Periodic neighbour of `idx` one step backward along `axis`.
    #[inline]
    pub fn prev(&self, idx: usize, axis: usize) -> usize {
        let s = self.stride(axis);
        if self.axis_index(idx, axis) == 0 {
            idx + self.points_per_dim * s - s
        } else {
            idx - s
        }
    }

    /// Physical coordinates of point `idx`.
    pub fn coords(&self, idx: usize) -> Vec<f64> {
        (0..self.dim).map(|k| self.axis_index(idx, k) as f64 * self.dx).collect()
    }

    /// Samples `f` at every spatial grid point.
    pub fn sample(&self, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        (0..self.n_space()).map(|i| f(&self.coords(i))).collect()
    }

    pub(crate) fn check_spatial(&self, f: &[f64], what: &str) -> Result<()> {
        if f.len() != self.n_space() {
            return Err(Error::ShapeMismatch(format!(
                "{what}: expected {} spatial values, got {}",
                self.n_space(),
                f.len()
            )));
        }
        Ok(())
    }
}

/// Convenience constructor mirroring [`Grid::new`].
pub fn make_grid(dim: usize, points_per_dim: usize, time_steps: usize, horizon: f64) -> Result<Grid> {
    Grid::new(dim, points_per_dim, time_steps, horizon)
}

/// Centered second-order periodic Laplacian.
pub fn laplacian_apply(grid: &Grid, f: &[f64]) -> Vec<f64> {
    debug_assert_eq!(f.len(), grid.n_space());
    let inv = 1.0 / (grid.dx * grid.dx);
    (0..f.len())
        .map(|i| {
            (0..grid.dim)
                .map(|k| f[grid.next(i, k)] - 2.0 * f[i] + f[grid.prev(i, k)])
                .sum::<f64>()
                * inv
        })
        .collect()
}

/// Backward and forward one-sided differences in every dimension.
pub fn one_sided_gradients(grid: &Grid, f: &[f64]) -> Vec<f64> {
    debug_assert_eq!(f.len(), grid.n_space());
    let d = grid.dim;
    let inv = 1.0 / grid.dx;
    let mut out = vec![0.0; f.len() * 2 * d];
    for (i, slot) in out.chunks_exact_mut(2 * d).enumerate() {
        for k in 0..d {
            slot[k] = (f[i] - f[grid.prev(i, k)]) * inv;
            slot[d + k] = (f[grid.next(i, k)] - f[i]) * inv;
        }
    }
    out
}

/// Engquist–Osher numerical Hamiltonian for `H(p) = |p|²/2`.
#[inline]
pub(crate) fn eo_point(slopes: &[f64], d: usize) -> f64 {
    let mut h = 0.0;
    for k in 0..d {
        let back = slopes[k].max(0.0);
        let fwd = slopes[d + k].min(0.0);
        h += back * back + fwd * fwd;
    }
    0.5 * h
}

/// `Ĥ_i = ½ Σ_k [max(D⁻_k f, 0)² + min(D⁺_k f, 0)²]` at every point.
pub fn eo_hamiltonian(grid: &Grid, slopes: &[f64]) -> Vec<f64> {
    let w = grid.slope_width();
    debug_assert_eq!(slopes.len(), grid.n_space() * w);
    slopes.chunks_exact(w).map(|s| eo_point(s, grid.dim)).collect()
}

/// Upwind advection `Adv[q] f`, the linearisation of [`eo_hamiltonian`]
/// with respect to the slopes of `f`, evaluated at the policy `q`.
pub fn advection_apply(grid: &Grid, q: &[f64], f: &[f64]) -> Vec<f64> {
    let d = grid.dim;
    let inv = 1.0 / grid.dx;
    (0..f.len())
        .map(|i| {
            let s = &q[i * 2 * d..(i + 1) * 2 * d];
            let mut acc = 0.0;
            for k in 0..d {
                acc += s[k].max(0.0) * (f[i] - f[grid.prev(i, k)]) * inv;
                acc += s[d + k].min(0.0) * (f[grid.next(i, k)] - f[i]) * inv;
            }
            acc
        })
        .collect()
}

/// Discrete `div(m q)`: the negative transpose of [`advection_apply`]'s
/// operator applied to `m`. Sums to zero over the torus for any `m`, `q`.
pub fn divergence_conservative(grid: &Grid, m: &[f64], q: &[f64]) -> Vec<f64> {
    let d = grid.dim;
    let inv = 1.0 / grid.dx;
    let mut out = vec![0.0; m.len()];
    for i in 0..m.len() {
        let s = &q[i * 2 * d..(i + 1) * 2 * d];
        for k in 0..d {
            let back = s[k].max(0.0) * inv * m[i];
            out[i] -= back;
            out[grid.prev(i, k)] += back;
            let fwd = s[d + k].min(0.0) * inv * m[i];
            out[i] += fwd;
            out[grid.next(i, k)] -= fwd;
        }
    }
    out
}

/// Rectangular quadrature `Σ f_i dx^d`.
pub fn integrate(grid: &Grid, f: &[f64]) -> f64 {
    f.iter().sum::<f64>() * grid.cell_volume()
}

/// Discrete `L²(𝕋^d)` inner product.
pub fn inner(grid: &Grid, a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() * grid.cell_volume()
}

pub fn l2_norm(grid: &Grid, f: &[f64]) -> f64 {
    inner(grid, f, f).sqrt()
}

/// `‖∇_h f‖²` using forward differences, the quantity penalised by the
/// gradient Tikhonov term. Its `L²` gradient is `-2 Δ_h f`.
pub fn gradient_energy(grid: &Grid, f: &[f64]) -> f64 {
    let inv = 1.0 / grid.dx;
    let mut acc = 0.0;
    for i in 0..f.len() {
        for k in 0..grid.dim {
            let g = (f[grid.next(i, k)] - f[i]) * inv;
            acc += g * g;
        }
    }
    acc * grid.cell_volume()
}

//! Space-time sampled fields.

use crate::grid::{one_sided_gradients, Grid};

/// Scalar function on every space-time grid point, stored time-major:
/// level `n` occupies `values[n * I^d .. (n + 1) * I^d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    n_space: usize,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: &Grid) -> Self {
        Self {
            n_space: grid.n_space(),
            values: vec![0.0; grid.n_space() * grid.levels()],
        }
    }

    /// Field that equals `f` at every time level.
    pub fn constant_in_time(grid: &Grid, f: &[f64]) -> Self {
        let mut out = Self::zeros(grid);
        for n in 0..grid.levels() {
            out.level_mut(n).copy_from_slice(f);
        }
        out
    }

    pub fn levels(&self) -> usize {
        self.values.len() / self.n_space
    }

    pub fn n_space(&self) -> usize {
        self.n_space
    }

    pub fn level(&self, n: usize) -> &[f64] {
        &self.values[n * self.n_space..(n + 1) * self.n_space]
    }

    pub fn level_mut(&mut self, n: usize) -> &mut [f64] {
        &mut self.values[n * self.n_space..(n + 1) * self.n_space]
    }

    pub fn last(&self) -> &[f64] {
        self.level(self.levels() - 1)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Discrete `L²(Q)` distance with rectangular weights in space and time.
    pub fn l2_distance(&self, other: &Self, grid: &Grid) -> f64 {
        let w = grid.cell_volume() * grid.dt();
        (self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            * w)
            .sqrt()
    }

    /// Right-endpoint rectangle rule `dt Σ_{n=1}^{N} f(·, t_n)`.
    pub fn time_integral(&self, grid: &Grid) -> Vec<f64> {
        let mut acc = vec![0.0; self.n_space];
        for n in 1..self.levels() {
            for (a, v) in acc.iter_mut().zip(self.level(n)) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a *= grid.dt());
        acc
    }
}

/// Two-sided slope representation of a vector field on every space-time
/// point: `2d` entries per spatial point per level.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyField {
    width: usize,
    n_space: usize,
    slopes: Vec<f64>,
}

impl PolicyField {
    pub fn zeros(grid: &Grid) -> Self {
        let width = grid.slope_width();
        Self {
            width,
            n_space: grid.n_space(),
            slopes: vec![0.0; grid.n_space() * width * grid.levels()],
        }
    }

    /// Slopes of `u` at every level.
    pub fn from_value(grid: &Grid, u: &ScalarField) -> Self {
        let mut out = Self::zeros(grid);
        for n in 0..grid.levels() {
            let s = one_sided_gradients(grid, u.level(n));
            out.level_mut(n).copy_from_slice(&s);
        }
        out
    }

    pub fn levels(&self) -> usize {
        self.slopes.len() / (self.width * self.n_space)
    }

    pub fn level(&self, n: usize) -> &[f64] {
        let len = self.width * self.n_space;
        &self.slopes[n * len..(n + 1) * len]
    }

    pub fn level_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.width * self.n_space;
        &mut self.slopes[n * len..(n + 1) * len]
    }

    pub fn slopes(&self) -> &[f64] {
        &self.slopes
    }

    pub fn is_finite(&self) -> bool {
        self.slopes.iter().all(|v| v.is_finite())
    }

    /// `max_n ‖q(·,t_n) − p(·,t_n)‖_{L²}` over all slope components.
    pub fn gap(&self, other: &Self, grid: &Grid) -> f64 {
        let w = grid.cell_volume();
        let worst = (0..self.levels())
            .map(|n| {
                self.level(n)
                    .iter()
                    .zip(other.level(n))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .fold(0.0, f64::max);
        (worst * w).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;

    #[test]
    fn levels_and_slices() {
        let g = make_grid(1, 4, 3, 1.0).unwrap();
        let mut f = ScalarField::zeros(&g);
        assert_eq!(f.levels(), 4);
        f.level_mut(2).copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(f.level(2), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(f.level(1), &[0.0; 4]);
    }

    #[test]
    fn time_integral_of_constant() {
        let g = make_grid(1, 4, 8, 2.0).unwrap();
        let f = ScalarField::constant_in_time(&g, &[1.0, 2.0, 0.0, -1.0]);
        let i = f.time_integral(&g);
        assert_eq!(i, vec![2.0, 4.0, 0.0, -2.0]);
    }

    #[test]
    fn gap_is_max_over_levels() {
        let g = make_grid(1, 4, 2, 1.0).unwrap();
        let a = PolicyField::zeros(&g);
        let mut b = PolicyField::zeros(&g);
        b.level_mut(1)[3] = 2.0;
        b.level_mut(2)[0] = 1.0;
        // sqrt(4 * dx)
        assert!((a.gap(&b, &g) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn policy_of_constant_is_zero() {
        let g = make_grid(2, 4, 2, 1.0).unwrap();
        let u = ScalarField::constant_in_time(&g, &[1.5; 16]);
        let q = PolicyField::from_value(&g, &u);
        assert!(q.slopes().iter().all(|&s| s == 0.0));
    }
}

//! Uniform space grids and time meshes.

use crate::error::{Error, Result};

/// Uniform nodes `x_min = x_0 < ... < x_{n-1} = x_max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid1D {
    x_min: f64,
    x_max: f64,
    n_points: usize,
}

impl Grid1D {
    pub fn new(x_min: f64, x_max: f64, n_points: usize) -> Result<Self> {
        if !(x_min.is_finite() && x_max.is_finite()) || x_max <= x_min {
            return Err(Error::InvalidInput(format!(
                "grid bounds [{x_min}, {x_max}] must be finite and increasing"
            )));
        }
        if n_points < 3 {
            return Err(Error::InvalidInput(format!(
                "grid needs at least 3 nodes, got {n_points}"
            )));
        }
        Ok(Self {
            x_min,
            x_max,
            n_points,
        })
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn len(&self) -> usize {
        self.n_points
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.n_points - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i + 1 == self.n_points {
            self.x_max
        } else {
            self.x_min + i as f64 * self.dx()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_points).map(|i| self.node(i)).collect()
    }

    /// Trapezoid quadrature weights.
    pub fn weights(&self) -> Vec<f64> {
        let dx = self.dx();
        let mut w = vec![dx; self.n_points];
        w[0] = 0.5 * dx;
        w[self.n_points - 1] = 0.5 * dx;
        w
    }

    pub fn weight(&self, i: usize) -> f64 {
        if i == 0 || i + 1 == self.n_points {
            0.5 * self.dx()
        } else {
            self.dx()
        }
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.n_points);
        let inner: f64 = values[1..self.n_points - 1].iter().sum();
        self.dx() * (inner + 0.5 * (values[0] + values[self.n_points - 1]))
    }

    /// Index of the node closest to `x` (clamped to the grid).
    pub fn nearest(&self, x: f64) -> usize {
        let t = ((x - self.x_min) / self.dx()).round();
        t.clamp(0.0, (self.n_points - 1) as f64) as usize
    }

    /// Exact node index of `x` if it lies on the grid (within `1e-9·dx`).
    pub fn index_of(&self, x: f64) -> Option<usize> {
        let t = (x - self.x_min) / self.dx();
        let i = t.round();
        if (t - i).abs() < 1e-9 && i >= 0.0 && i < self.n_points as f64 {
            Some(i as usize)
        } else {
            None
        }
    }

    /// Piecewise linear interpolation of nodal values; linear extrapolation
    /// from the outermost cell beyond the ends.
    pub fn interpolate(&self, values: &[f64], x: f64) -> f64 {
        let n = self.n_points;
        let dx = self.dx();
        let t = (x - self.x_min) / dx;
        let i = if t <= 0.0 {
            0
        } else if t >= (n - 1) as f64 {
            n - 2
        } else {
            (t.floor() as usize).min(n - 2)
        };
        let frac = t - i as f64;
        values[i] + frac * (values[i + 1] - values[i])
    }

    /// Same geometry, nodes `0, stride, 2·stride, ...`; the stride must divide `n - 1`.
    pub fn coarsen(&self, stride: usize) -> Result<Self> {
        if stride == 0 || (self.n_points - 1) % stride != 0 {
            return Err(Error::InvalidInput(format!(
                "stride {stride} does not divide {} intervals",
                self.n_points - 1
            )));
        }
        Grid1D::new(self.x_min, self.x_max, (self.n_points - 1) / stride + 1)
    }

    /// Nodes lying in `[lo, hi]`.
    pub fn window(&self, lo: f64, hi: f64) -> std::ops::Range<usize> {
        let eps = 1e-9 * self.dx();
        let start = (0..self.n_points)
            .find(|&i| self.node(i) >= lo - eps)
            .unwrap_or(self.n_points);
        let end = (0..self.n_points)
            .rev()
            .find(|&i| self.node(i) <= hi + eps)
            .map_or(start, |i| i + 1);
        start..end.max(start)
    }

    /// The core window `[x_min/2, x_max/2]` used for residuals.
    pub fn core(&self) -> std::ops::Range<usize> {
        self.window(0.5 * self.x_min, 0.5 * self.x_max)
    }
}

/// Uniform time nodes `t = s_0 < ... < s_N = T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeMesh {
    t0: f64,
    t1: f64,
    n_steps: usize,
}

impl TimeMesh {
    pub fn new(t0: f64, t1: f64, n_steps: usize) -> Result<Self> {
        if !(t0.is_finite() && t1.is_finite()) || t1 <= t0 || t0 < 0.0 {
            return Err(Error::InvalidInput(format!(
                "horizon ({t0}, {t1}) must satisfy T > t >= 0"
            )));
        }
        if n_steps == 0 {
            return Err(Error::InvalidInput(
                "time mesh needs at least one step".into(),
            ));
        }
        Ok(Self { t0, t1, n_steps })
    }

    /// Mesh with step as close as possible to `dt` (rounded to an integer step count).
    pub fn with_step(t0: f64, t1: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidInput(format!(
                "time step {dt} must be positive"
            )));
        }
        let n = ((t1 - t0) / dt).round().max(1.0) as usize;
        Self::new(t0, t1, n)
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t1(&self) -> f64 {
        self.t1
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn dt(&self) -> f64 {
        (self.t1 - self.t0) / self.n_steps as f64
    }

    pub fn time(&self, n: usize) -> f64 {
        if n == self.n_steps {
            self.t1
        } else {
            self.t0 + n as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|n| self.time(n)).collect()
    }

    /// The sub-mesh starting at node `n` (same step).
    pub fn tail(&self, n: usize) -> Result<Self> {
        if n >= self.n_steps {
            return Err(Error::InvalidInput(format!(
                "tail start {n} must be below {} steps",
                self.n_steps
            )));
        }
        Self::new(self.time(n), self.t1, self.n_steps - n)
    }

    /// The sub-mesh ending at node `n` (same step).
    pub fn head(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.n_steps {
            return Err(Error::InvalidInput(format!(
                "head end {n} must lie in 1..={}",
                self.n_steps
            )));
        }
        Self::new(self.t0, self.time(n), n)
    }

    /// Trapezoid quadrature in time of nodal values.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.n_nodes());
        let n = values.len();
        let inner: f64 = values[1..n - 1].iter().sum();
        self.dt() * (inner + 0.5 * (values[0] + values[n - 1]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_geometry() {
        let g = Grid1D::new(-8.0, 8.0, 401).unwrap();
        assert!((g.dx() - 0.04).abs() < 1e-15);
        assert_eq!(g.node(400), 8.0);
        assert_eq!(g.index_of(-4.0), Some(100));
        assert_eq!(g.core(), 100..301);
        let w: f64 = g.weights().iter().sum();
        assert!((w - 16.0).abs() < 1e-12);
    }

    #[test]
    fn trapezoid_is_exact_on_linear_functions() {
        let g = Grid1D::new(-1.0, 3.0, 17).unwrap();
        let v: Vec<f64> = g.nodes().iter().map(|x| 2.0 * x - 1.0).collect();
        assert!((g.integrate(&v) - 4.0).abs() < 1e-13);
    }

    #[test]
    fn interpolation_extrapolates_linearly() {
        let g = Grid1D::new(0.0, 1.0, 5).unwrap();
        let v: Vec<f64> = g.nodes().iter().map(|x| 3.0 * x + 1.0).collect();
        for x in [-0.5, 0.1, 0.6, 1.7] {
            assert!((g.interpolate(&v, x) - (3.0 * x + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Grid1D::new(1.0, 0.0, 10).is_err());
        assert!(Grid1D::new(0.0, 1.0, 2).is_err());
        assert!(TimeMesh::new(1.0, 1.0, 10).is_err());
        assert!(TimeMesh::new(0.0, 1.0, 0).is_err());
    }

    #[test]
    fn mesh_tail_keeps_step() {
        let m = TimeMesh::with_step(0.0, 0.5, 1e-3).unwrap();
        assert_eq!(m.n_steps(), 500);
        let t = m.tail(250).unwrap();
        assert_eq!(t.n_steps(), 250);
        assert!((t.dt() - m.dt()).abs() < 1e-15);
        assert!((t.t0() - 0.25).abs() < 1e-15);
    }
}

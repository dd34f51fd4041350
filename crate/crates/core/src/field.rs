//! Time-indexed grid functions.

use crate::error::{Error, Result};
use crate::grid::{Grid1D, TimeMesh};

macro_rules! grid_field {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            mesh: TimeMesh,
            grid: Grid1D,
            values: Vec<Vec<f64>>,
        }

        impl $name {
            /// Wraps `values[time][node]`, checking shape and finiteness.
            pub fn new(mesh: TimeMesh, grid: Grid1D, values: Vec<Vec<f64>>) -> Result<Self> {
                if values.len() != mesh.n_nodes() {
                    return Err(Error::MeshMismatch(format!(
                        "{} time slices for a mesh with {} nodes",
                        values.len(),
                        mesh.n_nodes()
                    )));
                }
                for (n, row) in values.iter().enumerate() {
                    if row.len() != grid.len() {
                        return Err(Error::MeshMismatch(format!(
                            "slice {n} has {} values for {} grid nodes",
                            row.len(),
                            grid.len()
                        )));
                    }
                    if let Some(i) = row.iter().position(|v| !v.is_finite()) {
                        return Err(Error::NotFinite {
                            s: mesh.time(n),
                            x: grid.node(i),
                        });
                    }
                }
                Ok(Self { mesh, grid, values })
            }

            pub fn from_fn(mesh: TimeMesh, grid: Grid1D, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
                let xs = grid.nodes();
                let values = (0..mesh.n_nodes())
                    .map(|n| {
                        let s = mesh.time(n);
                        xs.iter().map(|&x| f(s, x)).collect()
                    })
                    .collect();
                Self::new(mesh, grid, values)
            }

            pub fn zeros(mesh: TimeMesh, grid: Grid1D) -> Self {
                Self {
                    mesh,
                    grid,
                    values: vec![vec![0.0; grid.len()]; mesh.n_nodes()],
                }
            }

            pub fn mesh(&self) -> &TimeMesh {
                &self.mesh
            }

            pub fn grid(&self) -> &Grid1D {
                &self.grid
            }

            pub fn slice(&self, n: usize) -> &[f64] {
                &self.values[n]
            }

            pub fn values(&self) -> &[Vec<f64>] {
                &self.values
            }

            pub fn into_values(self) -> Vec<Vec<f64>> {
                self.values
            }

            pub fn at(&self, n: usize, i: usize) -> f64 {
                self.values[n][i]
            }

            /// Linear interpolation in x of slice `n`.
            pub fn interpolate(&self, n: usize, x: f64) -> f64 {
                self.grid.interpolate(&self.values[n], x)
            }

            pub fn max_abs(&self) -> f64 {
                self.values
                    .iter()
                    .flat_map(|r| r.iter())
                    .fold(0.0_f64, |m, v| m.max(v.abs()))
            }

            /// Max |self − other| over all times and the given node range.
            pub fn max_diff_on(&self, other: &Self, nodes: std::ops::Range<usize>) -> f64 {
                self.values
                    .iter()
                    .zip(&other.values)
                    .map(|(a, b)| {
                        a[nodes.clone()]
                            .iter()
                            .zip(&b[nodes.clone()])
                            .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
                    })
                    .fold(0.0, f64::max)
            }
        }
    };
}

grid_field!(
    /// Real-valued field `values[time][node]` (V, Ψ, z, ...).
    ScalarField
);
grid_field!(
    /// Gradient-type field `values[time][node]`; in one dimension a vector is a scalar.
    VectorField
);

impl ScalarField {
    /// `(1 − θ)·self + θ·other`.
    pub fn blend(&self, other: &ScalarField, theta: f64) -> ScalarField {
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (1.0 - theta) * x + theta * y)
                    .collect()
            })
            .collect();
        ScalarField {
            mesh: self.mesh,
            grid: self.grid,
            values,
        }
    }
}

/// Centered differences at interior nodes, second-order one-sided at the ends.
pub fn gradient_slice(values: &[f64], dx: f64) -> Vec<f64> {
    let n = values.len();
    let mut g = vec![0.0; n];
    let h2 = 2.0 * dx;
    for i in 1..n - 1 {
        g[i] = (values[i + 1] - values[i - 1]) / h2;
    }
    g[0] = (-3.0 * values[0] + 4.0 * values[1] - values[2]) / h2;
    g[n - 1] = (3.0 * values[n - 1] - 4.0 * values[n - 2] + values[n - 3]) / h2;
    g
}

/// Transpose of [`gradient_slice`] as a linear map: returns `Dᵀ v`.
pub fn gradient_transpose(v: &[f64], dx: f64) -> Vec<f64> {
    let n = v.len();
    let h2 = 2.0 * dx;
    let mut out = vec![0.0; n];
    for i in 1..n - 1 {
        out[i + 1] += v[i] / h2;
        out[i - 1] -= v[i] / h2;
    }
    out[0] += -3.0 * v[0] / h2;
    out[1] += 4.0 * v[0] / h2;
    out[2] += -v[0] / h2;
    out[n - 1] += 3.0 * v[n - 1] / h2;
    out[n - 2] += -4.0 * v[n - 1] / h2;
    out[n - 3] += v[n - 1] / h2;
    out
}

/// Standard three-point second difference at interior nodes, copied outward at the ends.
pub fn second_difference_slice(values: &[f64], dx: f64) -> Vec<f64> {
    let n = values.len();
    let mut d = vec![0.0; n];
    let h = dx * dx;
    for i in 1..n - 1 {
        d[i] = (values[i + 1] - 2.0 * values[i] + values[i - 1]) / h;
    }
    d[0] = d[1];
    d[n - 1] = d[n - 2];
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_transpose_is_adjoint() {
        let u: Vec<f64> = (0..9).map(|i| (i as f64 * 0.7).sin()).collect();
        let v: Vec<f64> = (0..9).map(|i| (i as f64 * 1.3).cos()).collect();
        let du = gradient_slice(&u, 0.3);
        let dtv = gradient_transpose(&v, 0.3);
        let lhs: f64 = du.iter().zip(&v).map(|(a, b)| a * b).sum();
        let rhs: f64 = u.iter().zip(&dtv).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn new_rejects_shape_and_nan() {
        let mesh = TimeMesh::new(0.0, 1.0, 2).unwrap();
        let grid = Grid1D::new(0.0, 1.0, 3).unwrap();
        assert!(ScalarField::new(mesh, grid, vec![vec![0.0; 3]; 2]).is_err());
        let mut v = vec![vec![0.0; 3]; 3];
        v[1][2] = f64::NAN;
        assert!(matches!(
            ScalarField::new(mesh, grid, v),
            Err(Error::NotFinite { .. })
        ));
    }
}

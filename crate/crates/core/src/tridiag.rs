//! Tridiagonal systems (Thomas algorithm).

use crate::error::{Error, Result};

/// Rows `lower[i]·x[i-1] + diag[i]·x[i] + upper[i]·x[i+1]`.
/// `lower[0]` and `upper[n-1]` are ignored.
#[derive(Debug, Clone)]
pub struct Tridiagonal {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Tridiagonal {
    pub fn zeros(n: usize) -> Self {
        Self {
            lower: vec![0.0; n],
            diag: vec![0.0; n],
            upper: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.len();
        let mut c = vec![0.0; n];
        let mut d = vec![0.0; n];
        let mut pivot = self.diag[0];
        check_pivot(0, pivot)?;
        c[0] = self.upper[0] / pivot;
        d[0] = rhs[0] / pivot;
        for i in 1..n {
            pivot = self.diag[i] - self.lower[i] * c[i - 1];
            check_pivot(i, pivot)?;
            c[i] = if i + 1 < n {
                self.upper[i] / pivot
            } else {
                0.0
            };
            d[i] = (rhs[i] - self.lower[i] * d[i - 1]) / pivot;
        }
        for i in (0..n - 1).rev() {
            d[i] -= c[i] * d[i + 1];
        }
        Ok(d)
    }

    /// Solves `Aᵀ y = rhs`.
    pub fn solve_transpose(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.len();
        let mut t = Tridiagonal::zeros(n);
        for i in 0..n {
            t.diag[i] = self.diag[i];
            if i + 1 < n {
                t.upper[i] = self.lower[i + 1];
                t.lower[i + 1] = self.upper[i];
            }
        }
        t.solve(rhs)
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .map(|i| {
                let mut y = self.diag[i] * x[i];
                if i > 0 {
                    y += self.lower[i] * x[i - 1];
                }
                if i + 1 < n {
                    y += self.upper[i] * x[i + 1];
                }
                y
            })
            .collect()
    }
}

fn check_pivot(row: usize, pivot: f64) -> Result<()> {
    if pivot.abs() < 1e-300 || !pivot.is_finite() {
        Err(Error::LinearSolveFailure { row, pivot })
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solve_round_trips() {
        let n = 7;
        let mut a = Tridiagonal::zeros(n);
        for i in 0..n {
            a.diag[i] = 4.0 + i as f64 * 0.1;
            a.lower[i] = -1.0 - 0.05 * i as f64;
            a.upper[i] = -0.5;
        }
        let x: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let b = a.apply(&x);
        let y = a.solve(&b).unwrap();
        for (u, v) in x.iter().zip(&y) {
            assert!((u - v).abs() < 1e-13);
        }
        let z = a.solve_transpose(&b).unwrap();
        let mut at = Tridiagonal::zeros(n);
        for i in 0..n {
            at.diag[i] = a.diag[i];
            if i + 1 < n {
                at.upper[i] = a.lower[i + 1];
                at.lower[i + 1] = a.upper[i];
            }
        }
        let back = at.apply(&z);
        for (u, v) in back.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_pivot_is_reported() {
        let a = Tridiagonal::zeros(3);
        assert!(matches!(
            a.solve(&[1.0, 1.0, 1.0]),
            Err(Error::LinearSolveFailure { row: 0, .. })
        ));
    }
}

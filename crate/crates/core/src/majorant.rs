//! A priori bounds: feasibility windows, the majorants
//! `z = β|x|²/2 + μ` of |V| and `z̄ = β̄|x|²/2 + μ̄` of ½|DV|², the root η*,
//! and π_γ-weighted norms.

use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};
use crate::field::{ScalarField, VectorField};
use crate::grid::{Grid1D, TimeMesh};
use crate::model::AssumptionConstants;
use crate::quad::adaptive_simpson;

/// `l(η) = (1/η)(1 + 1/(4η))² − 1 − 1/η`, decreasing from +∞ to −1.
pub fn eta_objective(eta: f64) -> f64 {
    let q = 1.0 + 1.0 / (4.0 * eta);
    q * q / eta - 1.0 - 1.0 / eta
}

/// Root of [`eta_objective`] by bisection on `(1e-6, 1e3)`.
pub fn eta_star(tolerance: f64) -> Result<f64> {
    let (lo, hi) = (1e-6, 1e3);
    let (mut a, mut b) = (lo, hi);
    if !(eta_objective(a) > 0.0 && eta_objective(b) < 0.0) {
        return Err(Error::BracketFailure { lo, hi });
    }
    let tol = tolerance.max(f64::EPSILON);
    for _ in 0..400 {
        let m = 0.5 * (a + b);
        let fm = eta_objective(m);
        if fm == 0.0 {
            return Ok(m);
        }
        if fm > 0.0 {
            a = m;
        } else {
            b = m;
        }
        if b - a <= tol * m {
            break;
        }
    }
    // Pick the end with the smaller residual.
    Ok(if eta_objective(a).abs() <= eta_objective(b).abs() {
        a
    } else {
        b
    })
}

/// η* to machine precision.
pub fn default_eta_star() -> f64 {
    eta_star(1e-16).expect("l changes sign on (1e-6, 1e3)")
}

/// `b = 1/η* + 1/(4η*²)`, the shift in the gradient Riccati solution.
fn gradient_shift(eta: f64) -> f64 {
    1.0 / eta + 1.0 / (4.0 * eta * eta)
}

/// Largest horizon lengths `T − t` for the value majorant and the gradient
/// majorant in the small-time regime.
pub fn feasibility_windows(k: &AssumptionConstants) -> (f64, f64) {
    let root = (k.delta * k.c).sqrt();
    let theta0 = (2.0 * k.c_t * (k.delta / k.c).sqrt()).atan();
    let window_v = (FRAC_PI_2 - theta0) / (2.0 * root);
    let eta = default_eta_star();
    let window_dv = 1.0 / (2.0 * k.c * eta * (2.0 * k.c_t + gradient_shift(eta)));
    (window_v, window_dv)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MajorantMode {
    /// Riccati majorants valid inside the feasibility windows.
    SmallTime,
    /// Linear-in-time majorants of the convex case, parameterized by the
    /// growth constant `C` of `|DV| ≤ C(1+|x|)` and `|H|, |dF/dν| ≤ C(1+|x|²)`.
    GlobalConvex { global_c: f64 },
}

/// Closed-form β, μ, β̄, μ̄ on a horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct MajorantParams {
    pub constants: AssumptionConstants,
    pub mode: MajorantMode,
    pub horizon: (f64, f64),
    pub trace_a: f64,
    pub eta_star: f64,
    pub window_v: f64,
    pub window_dv: f64,
}

impl MajorantParams {
    pub fn new(
        constants: AssumptionConstants,
        horizon: (f64, f64),
        trace_a: f64,
        mode: MajorantMode,
    ) -> Result<Self> {
        let (window_v, window_dv) = feasibility_windows(&constants);
        let len = horizon.1 - horizon.0;
        match mode {
            MajorantMode::SmallTime => {
                let window = window_v.min(window_dv);
                if !(len < window) {
                    return Err(Error::InfeasibleHorizon {
                        horizon: len,
                        window,
                    });
                }
            }
            MajorantMode::GlobalConvex { global_c } => {
                if constants.lambda <= 0.0 {
                    return Err(Error::InvalidInput(
                        "global majorants need a strong-convexity modulus lambda > 0".into(),
                    ));
                }
                if !(global_c > 0.0 && global_c.is_finite()) {
                    return Err(Error::InvalidInput(
                        "global constant C must be positive".into(),
                    ));
                }
            }
        }
        Ok(Self {
            constants,
            mode,
            horizon,
            trace_a,
            eta_star: default_eta_star(),
            window_v,
            window_dv,
        })
    }

    fn theta(&self, s: f64) -> f64 {
        let k = &self.constants;
        (2.0 * k.c_t * (k.delta / k.c).sqrt()).atan()
            + 2.0 * (k.delta * k.c).sqrt() * (self.horizon.1 - s)
    }

    pub fn beta(&self, s: f64) -> f64 {
        let k = &self.constants;
        let tau = self.horizon.1 - s;
        match self.mode {
            MajorantMode::SmallTime => 2.0 * (k.c / k.delta).sqrt() * self.theta(s).tan(),
            MajorantMode::GlobalConvex { global_c } => 4.0 * k.c_t + 2.0 * global_c * tau,
        }
    }

    pub fn mu(&self, s: f64) -> f64 {
        let k = &self.constants;
        let tau = self.horizon.1 - s;
        match self.mode {
            MajorantMode::SmallTime => {
                // ∫_s^T β = (1/δ) ln(cos θ(T) / cos θ(s)).
                let int_beta =
                    (self.theta(self.horizon.1).cos() / self.theta(s).cos()).ln() / k.delta;
                2.0 * k.c_t + 2.0 * k.c * tau + 0.5 * self.trace_a * int_beta
            }
            MajorantMode::GlobalConvex { global_c } => {
                2.0 * k.c_t
                    + global_c * tau
                    + self.trace_a * (2.0 * k.c_t * tau + 0.5 * global_c * tau * tau)
            }
        }
    }

    pub fn beta_bar(&self, s: f64) -> f64 {
        let k = &self.constants;
        match self.mode {
            MajorantMode::SmallTime => {
                let b = gradient_shift(self.eta_star);
                let inv =
                    1.0 / (2.0 * k.c_t + b) - 2.0 * k.c * self.eta_star * (self.horizon.1 - s);
                1.0 / inv - b
            }
            MajorantMode::GlobalConvex { global_c } => 2.0 * global_c * global_c,
        }
    }

    /// `μ̄(s) = c_T e^{κ(T−s)} + ∫_s^T [c(1+1/η*) + ½tr(a)β̄(τ)] e^{κ(τ−s)} dτ`
    /// with `κ = c(4 + 1/η*)`, the solution of
    /// `−μ̄' − ½tr(a)β̄ = c(1+1/η*) + κμ̄`, `μ̄(T) = c_T`.
    pub fn mu_bar(&self, s: f64) -> f64 {
        let k = &self.constants;
        match self.mode {
            MajorantMode::SmallTime => {
                let eta = self.eta_star;
                let kappa = k.c * (4.0 + 1.0 / eta);
                let t1 = self.horizon.1;
                let integrand = |tau: f64| {
                    (k.c * (1.0 + 1.0 / eta) + 0.5 * self.trace_a * self.beta_bar(tau))
                        * (kappa * (tau - s)).exp()
                };
                k.c_t * (kappa * (t1 - s)).exp() + adaptive_simpson(&integrand, s, t1, 1e-13)
            }
            MajorantMode::GlobalConvex { global_c } => global_c * global_c,
        }
    }
}

/// Nodal `z` and `z̄` on `mesh × grid`.
pub fn majorant_fields(
    constants: &AssumptionConstants,
    mesh: &TimeMesh,
    grid: &Grid1D,
    trace_a: f64,
    mode: MajorantMode,
) -> Result<(ScalarField, ScalarField)> {
    let p = MajorantParams::new(*constants, (mesh.t0(), mesh.t1()), trace_a, mode)?;
    let times = mesh.times();
    let xs = grid.nodes();
    let mut z = Vec::with_capacity(times.len());
    let mut zb = Vec::with_capacity(times.len());
    for (n, &s) in times.iter().enumerate() {
        let (beta, mu) = if n == mesh.n_steps() {
            // Exact terminal values, free of rounding in the closed forms.
            match mode {
                MajorantMode::SmallTime | MajorantMode::GlobalConvex { .. } => {
                    (4.0 * constants.c_t, 2.0 * constants.c_t)
                }
            }
        } else {
            (p.beta(s), p.mu(s))
        };
        let (bb, mb) = match (n == mesh.n_steps(), mode) {
            (true, MajorantMode::SmallTime) => (2.0 * constants.c_t, constants.c_t),
            _ => (p.beta_bar(s), p.mu_bar(s)),
        };
        z.push(xs.iter().map(|x| 0.5 * beta * x * x + mu).collect());
        zb.push(xs.iter().map(|x| 0.5 * bb * x * x + mb).collect());
    }
    Ok((
        ScalarField::new(*mesh, *grid, z)?,
        ScalarField::new(*mesh, *grid, zb)?,
    ))
}

/// The value majorant `z` in the small-time regime.
pub fn small_time_majorant(
    constants: &AssumptionConstants,
    mesh: &TimeMesh,
    grid: &Grid1D,
    trace_a: f64,
) -> Result<ScalarField> {
    let p = MajorantParams::new(
        *constants,
        (mesh.t0(), mesh.t1()),
        trace_a,
        MajorantMode::SmallTime,
    );
    // Only the value window matters for z.
    let p = match p {
        Ok(p) => p,
        Err(Error::InfeasibleHorizon { .. }) => {
            let (wv, _) = feasibility_windows(constants);
            let len = mesh.t1() - mesh.t0();
            if !(len < wv) {
                return Err(Error::InfeasibleHorizon {
                    horizon: len,
                    window: wv,
                });
            }
            MajorantParams {
                constants: *constants,
                mode: MajorantMode::SmallTime,
                horizon: (mesh.t0(), mesh.t1()),
                trace_a,
                eta_star: default_eta_star(),
                window_v: wv,
                window_dv: feasibility_windows(constants).1,
            }
        }
        Err(e) => return Err(e),
    };
    let xs = grid.nodes();
    let values = (0..mesh.n_nodes())
        .map(|n| {
            let s = mesh.time(n);
            let (beta, mu) = (p.beta(s), p.mu(s));
            xs.iter().map(|x| 0.5 * beta * x * x + mu).collect()
        })
        .collect();
    ScalarField::new(*mesh, *grid, values)
}

/// Default `C` for the global majorants from a gradient growth rate
/// `g ≥ sup |DV|/(1+|x|)`: the larger of `g` and `2c + δg²` (which bounds
/// the right-hand side of the HJB equation by `C(1+x²)`).
pub fn fit_global_constant(constants: &AssumptionConstants, gradient_growth: f64) -> f64 {
    gradient_growth.max(2.0 * constants.c + constants.delta * gradient_growth * gradient_growth)
}

/// The weight `π_γ(x) = (1+|x|²)^{−γ}` at the grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedNorm {
    pub gamma: f64,
    pub grid: Grid1D,
    pub values: Vec<f64>,
}

impl WeightedNorm {
    pub fn new(grid: Grid1D, gamma: f64) -> Self {
        let values = grid
            .nodes()
            .iter()
            .map(|x| (1.0 + x * x).powf(-gamma))
            .collect();
        Self {
            gamma,
            grid,
            values,
        }
    }

    /// `∫ |f|² π_γ dx` for one slice.
    pub fn slice(&self, f: &[f64]) -> f64 {
        let v: Vec<f64> = f.iter().zip(&self.values).map(|(a, w)| a * a * w).collect();
        self.grid.integrate(&v)
    }
}

/// Trapezoid space-time integral of `|field|² π_γ`.
pub fn weighted_norm(values: &[Vec<f64>], mesh: &TimeMesh, grid: &Grid1D, gamma: f64) -> f64 {
    let w = WeightedNorm::new(*grid, gamma);
    let per_time: Vec<f64> = values.iter().map(|r| w.slice(r)).collect();
    mesh.integrate(&per_time)
}

pub fn weighted_norm_scalar(field: &ScalarField, gamma: f64) -> f64 {
    weighted_norm(field.values(), field.mesh(), field.grid(), gamma)
}

pub fn weighted_norm_vector(field: &VectorField, gamma: f64) -> f64 {
    weighted_norm(field.values(), field.mesh(), field.grid(), gamma)
}

/// Midpoint-in-time version for slices living between mesh nodes.
pub fn weighted_norm_slices(slices: &[Vec<f64>], dt: f64, grid: &Grid1D, gamma: f64) -> f64 {
    let w = WeightedNorm::new(*grid, gamma);
    slices.iter().map(|r| dt * w.slice(r)).sum()
}

/// `max (|V| − z − slack(1+x²))` over all nodes; non-positive means dominated.
pub fn domination_excess(v: &ScalarField, z: &ScalarField, slack: f64) -> f64 {
    excess(v.values(), z, slack, |u| u.abs())
}

/// `max (½|DV|² − z̄ − slack(1+x²))` over all nodes.
pub fn gradient_domination_excess(dv: &VectorField, z_bar: &ScalarField, slack: f64) -> f64 {
    excess(dv.values(), z_bar, slack, |p| 0.5 * p * p)
}

fn excess(values: &[Vec<f64>], z: &ScalarField, slack: f64, f: impl Fn(f64) -> f64) -> f64 {
    let xs = z.grid().nodes();
    let mut worst = f64::NEG_INFINITY;
    for (row, zr) in values.iter().zip(z.values()) {
        for ((&u, &b), &x) in row.iter().zip(zr).zip(&xs) {
            worst = worst.max(f(u) - b - slack * (1.0 + x * x));
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k(c: f64, c_t: f64, delta: f64) -> AssumptionConstants {
        AssumptionConstants {
            c,
            c_t,
            delta,
            lambda: 0.5,
            gamma: 4.0,
        }
    }

    #[test]
    fn eta_objective_values() {
        assert!((eta_objective(0.5) - 1.5).abs() < 1e-15);
        assert!((eta_objective(1.0) + 0.4375).abs() < 1e-15);
        let e = default_eta_star();
        assert!(e > 0.5 && e < 1.0);
        assert!(eta_objective(e).abs() <= 1e-12);
    }

    #[test]
    fn value_window_without_terminal_cost() {
        let (wv, wdv) = feasibility_windows(&k(1.0, 0.0, 1.0));
        assert!((wv - std::f64::consts::FRAC_PI_4).abs() < 1e-12);
        assert!(wdv > 0.0);
    }

    #[test]
    fn beta_example_and_terminal_values() {
        // Built directly: β only needs the value window, which 0.3 < π/4 satisfies.
        let p = MajorantParams {
            constants: k(1.0, 0.0, 1.0),
            mode: MajorantMode::SmallTime,
            horizon: (0.0, 0.3),
            trace_a: 1.0,
            eta_star: default_eta_star(),
            window_v: 0.0,
            window_dv: 0.0,
        };
        assert!((p.beta(0.0) - 2.0 * 0.6f64.tan()).abs() < 1e-12);
        assert!((p.beta(0.0) - 1.3682).abs() < 1e-4);
        let q = MajorantParams::new(k(1.0, 1.0, 1.0), (0.0, 0.1), 1.0, MajorantMode::SmallTime)
            .unwrap();
        assert!((q.beta(0.1) - 4.0).abs() < 1e-12);
        assert!((q.mu(0.1) - 2.0).abs() < 1e-12);
        assert!((q.beta_bar(0.1) - 2.0).abs() < 1e-12);
        assert!((q.mu_bar(0.1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_norm_of_one() {
        let grid = Grid1D::new(-8.0, 8.0, 401).unwrap();
        let mesh = TimeMesh::new(0.0, 1.0, 10).unwrap();
        let f = ScalarField::from_fn(mesh, grid, |_, _| 1.0).unwrap();
        let n = weighted_norm_scalar(&f, 4.0);
        let oracle = adaptive_simpson(&|x: f64| (1.0 + x * x).powi(-4), -8.0, 8.0, 1e-13);
        assert!((n - oracle).abs() < 1e-4);
        assert!((n - 0.9817).abs() < 1e-4);
        let f2 = ScalarField::from_fn(mesh, grid, |_, _| 2.0).unwrap();
        assert_eq!(weighted_norm_scalar(&f2, 4.0), 4.0 * n);
    }

    #[test]
    fn global_mode_needs_convexity_modulus() {
        let mut kk = k(1.0, 1.0, 1.0);
        kk.lambda = 0.0;
        assert!(MajorantParams::new(
            kk,
            (0.0, 5.0),
            1.0,
            MajorantMode::GlobalConvex { global_c: 2.0 }
        )
        .is_err());
        let g = MajorantParams::new(
            k(1.0, 1.0, 1.0),
            (0.0, 5.0),
            1.0,
            MajorantMode::GlobalConvex { global_c: 2.0 },
        )
        .unwrap();
        assert_eq!(g.beta(5.0), 4.0);
        assert_eq!(g.mu(5.0), 2.0);
    }
}

//! One-dimensional parabolic solvers.
//!
//! The backward equation `−∂Ψ/∂s − (a/2)Ψ'' − g Ψ' = l`, `Ψ(T) = l_T` is
//! stepped with implicit diffusion and implicit drift (centered where the cell
//! Péclet number allows it, upwind otherwise), so the step matrix is an
//! M-matrix for every Δt. The forward Fokker–Planck step is the exact
//! discrete adjoint of the backward step under trapezoid weights, which gives
//! exact mass conservation and exact discrete duality between the two.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{ScalarField, VectorField};
use crate::grid::{Grid1D, TimeMesh};
use crate::measure::{GridDensity, MeasureFlow, MeasureSlice};
use crate::tridiag::Tridiagonal;

/// Largest admissible boundary-cell mass of a forward flow.
pub const MASS_LEAK_LIMIT: f64 = 1e-6;

/// How the two outermost nodes are closed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BoundaryPolicy {
    /// The end-node gradient is extrapolated from interior nodes 1 to 4 and
    /// lagged by one step. Exact on quadratics.
    #[default]
    QuadraticExtrapolation,
    /// Zero gradient at the end nodes.
    Neumann,
}

type SpaceTimeFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Coefficient given as nodal slices or as a callable `(s, x)`.
#[derive(Clone, Default)]
pub enum Coefficient {
    #[default]
    Zero,
    Nodal(Vec<Vec<f64>>),
    Callable(SpaceTimeFn),
}

impl Coefficient {
    pub fn callable(f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        Coefficient::Callable(Arc::new(f))
    }

    fn slice(&self, n: usize, s: f64, grid: &Grid1D) -> Vec<f64> {
        match self {
            Coefficient::Zero => vec![0.0; grid.len()],
            Coefficient::Nodal(v) => v[n].clone(),
            Coefficient::Callable(f) => grid.nodes().iter().map(|&x| f(s, x)).collect(),
        }
    }

    fn check_shape(&self, mesh: &TimeMesh, grid: &Grid1D, what: &str) -> Result<()> {
        if let Coefficient::Nodal(v) = self {
            if v.len() < mesh.n_nodes() || v.iter().any(|r| r.len() != grid.len()) {
                return Err(Error::MeshMismatch(format!(
                    "{what} coefficient does not match the mesh × grid"
                )));
            }
        }
        Ok(())
    }
}

impl From<&VectorField> for Coefficient {
    fn from(f: &VectorField) -> Self {
        Coefficient::Nodal(f.values().to_vec())
    }
}

impl From<&ScalarField> for Coefficient {
    fn from(f: &ScalarField) -> Self {
        Coefficient::Nodal(f.values().to_vec())
    }
}

impl std::fmt::Debug for Coefficient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Coefficient::Zero => f.write_str("Zero"),
            Coefficient::Nodal(v) => write!(f, "Nodal({} slices)", v.len()),
            Coefficient::Callable(_) => f.write_str("Callable(..)"),
        }
    }
}

/// Terminal data `l_T`.
#[derive(Clone)]
pub enum Terminal {
    Nodal(Vec<f64>),
    Callable(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl Terminal {
    pub fn callable(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Terminal::Callable(Arc::new(f))
    }

    fn values(&self, grid: &Grid1D) -> Result<Vec<f64>> {
        match self {
            Terminal::Nodal(v) if v.len() == grid.len() => Ok(v.clone()),
            Terminal::Nodal(v) => Err(Error::MeshMismatch(format!(
                "terminal data has {} values for {} nodes",
                v.len(),
                grid.len()
            ))),
            Terminal::Callable(f) => Ok(grid.nodes().iter().map(|&x| f(x)).collect()),
        }
    }
}

impl std::fmt::Debug for Terminal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Terminal::Nodal(v) => write!(f, "Nodal({} values)", v.len()),
            Terminal::Callable(_) => f.write_str("Callable(..)"),
        }
    }
}

/// Data `(g, l, l_T)` of the backward linear equation.
#[derive(Debug, Clone)]
pub struct LinearPDECoefficients {
    pub drift: Coefficient,
    pub source: Coefficient,
    pub terminal: Terminal,
    /// When set, `|g| ≤ C(1+|x|)`, `|l| ≤ C(1+x²)`, `|l_T| ≤ C(1+x²)` are
    /// checked at the first and last nodes of the mesh.
    pub growth_bound: Option<f64>,
}

impl LinearPDECoefficients {
    pub fn new(drift: Coefficient, source: Coefficient, terminal: Terminal) -> Self {
        Self {
            drift,
            source,
            terminal,
            growth_bound: None,
        }
    }

    fn check_growth(&self, mesh: &TimeMesh, grid: &Grid1D, bound: f64) -> Result<()> {
        let xs = grid.nodes();
        let check = |what: &str, vals: &[f64], quadratic: bool| -> Result<()> {
            for (&x, &v) in xs.iter().zip(vals) {
                let b = if quadratic {
                    bound * (1.0 + x * x)
                } else {
                    bound * (1.0 + x.abs())
                };
                if !(v.abs() <= b) {
                    return Err(Error::GrowthViolation {
                        what: what.to_string(),
                        x,
                        value: v.abs(),
                        bound: b,
                    });
                }
            }
            Ok(())
        };
        for n in [0, mesh.n_steps()] {
            let s = mesh.time(n);
            check("drift", &self.drift.slice(n, s, grid), false)?;
            check("source", &self.source.slice(n, s, grid), true)?;
        }
        check("terminal", &self.terminal.values(grid)?, true)
    }
}

/// One backward step `Ψⁿ = A⁻¹ (I + Δt E) Ψⁿ⁺¹ + Δt A⁻¹ lⁿ`, where `A = I − Δt L`
/// holds the implicit diffusion/drift and `E` the lagged boundary gradient.
#[derive(Debug, Clone)]
pub struct BackwardStep {
    matrix: Tridiagonal,
    dt: f64,
    dx: f64,
    /// Coefficients of the lagged boundary gradients (zero under Neumann).
    left: f64,
    right: f64,
}

impl BackwardStep {
    /// `drift` is `g` at the nodes of the current (earlier) time level.
    pub fn new(a: f64, dx: f64, dt: f64, drift: &[f64], bc: BoundaryPolicy) -> Self {
        let n = drift.len();
        assert!(n >= 5, "the boundary closure needs at least 5 nodes");
        let d = a / (2.0 * dx * dx);
        let mut m = Tridiagonal::zeros(n);
        for i in 1..n - 1 {
            let g = drift[i];
            let (lo, up) = if g.abs() * dx <= a {
                (d - g / (2.0 * dx), d + g / (2.0 * dx))
            } else if g > 0.0 {
                (d, d + g / dx)
            } else {
                (d - g / dx, d)
            };
            m.lower[i] = -dt * lo;
            m.upper[i] = -dt * up;
            m.diag[i] = 1.0 + dt * (lo + up);
        }
        m.diag[0] = 1.0 + dt * 2.0 * d;
        m.upper[0] = -dt * 2.0 * d;
        m.diag[n - 1] = 1.0 + dt * 2.0 * d;
        m.lower[n - 1] = -dt * 2.0 * d;
        let (left, right) = match bc {
            BoundaryPolicy::Neumann => (0.0, 0.0),
            BoundaryPolicy::QuadraticExtrapolation => (drift[0] - a / dx, drift[n - 1] + a / dx),
        };
        Self {
            matrix: m,
            dt,
            dx,
            left,
            right,
        }
    }

    /// Stencil of the extrapolated left-end gradient: nodes 1..=4.
    fn left_stencil(&self) -> [(usize, f64); 4] {
        let h = 2.0 * self.dx;
        [(1, -3.0 / h), (2, 2.0 / h), (3, 3.0 / h), (4, -2.0 / h)]
    }

    /// Stencil of the extrapolated right-end gradient, mirrored.
    fn right_stencil(&self, n: usize) -> [(usize, f64); 4] {
        let h = 2.0 * self.dx;
        [
            (n - 2, 3.0 / h),
            (n - 3, -2.0 / h),
            (n - 4, -3.0 / h),
            (n - 5, 2.0 / h),
        ]
    }

    /// Backward step with nodal source `l` at the current level.
    pub fn apply(&self, next: &[f64], source: Option<&[f64]>) -> Result<Vec<f64>> {
        let n = next.len();
        let mut rhs = next.to_vec();
        if let Some(l) = source {
            for (r, v) in rhs.iter_mut().zip(l) {
                *r += self.dt * v;
            }
        }
        if self.left != 0.0 {
            let g: f64 = self.left_stencil().iter().map(|&(j, c)| c * next[j]).sum();
            rhs[0] += self.dt * self.left * g;
        }
        if self.right != 0.0 {
            let g: f64 = self
                .right_stencil(n)
                .iter()
                .map(|&(j, c)| c * next[j])
                .sum();
            rhs[n - 1] += self.dt * self.right * g;
        }
        self.matrix.solve(&rhs)
    }

    /// Transpose of the homogeneous step: returns `(I + Δt E)ᵀ A⁻ᵀ y`.
    pub fn apply_transpose(&self, y: &[f64]) -> Result<Vec<f64>> {
        let n = y.len();
        let mut out = self.matrix.solve_transpose(y)?;
        let (y0, yn) = (out[0], out[n - 1]);
        if self.left != 0.0 {
            for (j, c) in self.left_stencil() {
                out[j] += self.dt * self.left * c * y0;
            }
        }
        if self.right != 0.0 {
            for (j, c) in self.right_stencil(n) {
                out[j] += self.dt * self.right * c * yn;
            }
        }
        Ok(out)
    }

    /// Forward density step: `mⁿ⁺¹ = W⁻¹ Sᵀ W mⁿ` for trapezoid weights `w`.
    pub fn forward_density(&self, m: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        let mass: Vec<f64> = m.iter().zip(w).map(|(a, b)| a * b).collect();
        let out = self.apply_transpose(&mass)?;
        Ok(out.iter().zip(w).map(|(a, b)| a / b).collect())
    }
}

fn check_grid(grid: &Grid1D) -> Result<()> {
    if grid.len() < 5 {
        return Err(Error::InvalidInput(
            "parabolic solvers need at least 5 grid nodes".into(),
        ));
    }
    Ok(())
}

/// Backward sweep from the terminal data at `T` to `t`.
pub fn solve_backward_linear(
    coeffs: &LinearPDECoefficients,
    sigma: f64,
    mesh: &TimeMesh,
    grid: &Grid1D,
    bc: BoundaryPolicy,
) -> Result<ScalarField> {
    check_grid(grid)?;
    coeffs.drift.check_shape(mesh, grid, "drift")?;
    coeffs.source.check_shape(mesh, grid, "source")?;
    if let Some(bound) = coeffs.growth_bound {
        coeffs.check_growth(mesh, grid, bound)?;
    }
    let a = sigma * sigma;
    let (dx, dt) = (grid.dx(), mesh.dt());
    let n_steps = mesh.n_steps();
    let mut values = vec![Vec::new(); n_steps + 1];
    values[n_steps] = coeffs.terminal.values(grid)?;
    let zero_source = matches!(coeffs.source, Coefficient::Zero);
    for n in (0..n_steps).rev() {
        let s = mesh.time(n);
        let g = coeffs.drift.slice(n, s, grid);
        let step = BackwardStep::new(a, dx, dt, &g, bc);
        let l = (!zero_source).then(|| coeffs.source.slice(n, s, grid));
        values[n] = step.apply(&values[n + 1], l.as_deref())?;
    }
    ScalarField::new(*mesh, *grid, values)
}

/// Forward Fokker–Planck flow `∂m/∂s = (a/2) m'' − (g m)'` from `m0`, as the
/// discrete adjoint of [`solve_backward_linear`].
pub fn solve_forward_fp(
    drift: &VectorField,
    sigma: f64,
    mesh: &TimeMesh,
    grid: &Grid1D,
    m0: &GridDensity,
    bc: BoundaryPolicy,
) -> Result<MeasureFlow> {
    check_grid(grid)?;
    if drift.mesh() != mesh || drift.grid() != grid || m0.grid() != grid {
        return Err(Error::MeshMismatch(
            "drift field, initial density and solver mesh must agree".into(),
        ));
    }
    let a = sigma * sigma;
    let w = grid.weights();
    let (dx, dt) = (grid.dx(), mesh.dt());
    let mut slices = Vec::with_capacity(mesh.n_nodes());
    let mut current = m0.values().to_vec();
    let mut leak = boundary_mass(&current, &w);
    slices.push(MeasureSlice::Grid(m0.clone()));
    for n in 0..mesh.n_steps() {
        let step = BackwardStep::new(a, dx, dt, drift.slice(n), bc);
        // The propagated state stays the exact adjoint; only stored slices are
        // clipped. Clipping inside the recursion feeds mass back through the
        // extrapolated boundary stencil and grows without bound.
        current = step.forward_density(&current, &w)?;
        let mut negative = 0.0;
        let clipped: Vec<f64> = current
            .iter()
            .zip(&w)
            .map(|(&v, wi)| {
                if v < 0.0 {
                    negative -= v * wi;
                }
                v.max(0.0)
            })
            .collect();
        leak = leak.max(boundary_mass(&clipped, &w) + negative);
        slices.push(MeasureSlice::Grid(GridDensity::from_raw(*grid, clipped)));
    }
    if leak > MASS_LEAK_LIMIT {
        return Err(Error::MassLeak {
            leak,
            limit: MASS_LEAK_LIMIT,
        });
    }
    if slices
        .last()
        .and_then(|s| s.as_grid())
        .is_some_and(|g| g.is_leaking())
    {
        log::warn!("forward flow has boundary density above the leak warning level");
    }
    Ok(MeasureFlow::complete(*mesh, slices)?.with_leak(leak))
}

fn boundary_mass(m: &[f64], w: &[f64]) -> f64 {
    let n = m.len();
    m[0] * w[0] + m[n - 1] * w[n - 1]
}

/// Green function of the backward equation with terminal time `s`:
/// `values[τ][z][ζ] = G(τ, z; s, ζ)` for mesh nodes `τ ≤ s`.
#[derive(Debug, Clone, PartialEq)]
pub struct GreenTable {
    pub mesh: TimeMesh,
    pub grid: Grid1D,
    pub s_index: usize,
    pub values: Vec<Vec<Vec<f64>>>,
}

impl GreenTable {
    /// `∫ G(τ, z; s, ζ) f(ζ) dζ` as a nodal function of `z`.
    pub fn integrate_against(&self, tau: usize, f: &[f64]) -> Vec<f64> {
        let w = self.grid.weights();
        self.values[tau]
            .iter()
            .map(|row| {
                row.iter()
                    .zip(f)
                    .zip(&w)
                    .map(|((g, v), wi)| g * v * wi)
                    .sum()
            })
            .collect()
    }
}

/// One backward solve per ζ-node with discrete-delta terminal data
/// `1/w_ζ` (trapezoid weight), which makes `∫ G dζ = 1` exact.
pub fn tabulate_green(
    drift: &VectorField,
    sigma: f64,
    mesh: &TimeMesh,
    grid: &Grid1D,
    s_index: usize,
    bc: BoundaryPolicy,
) -> Result<GreenTable> {
    check_grid(grid)?;
    if s_index > mesh.n_steps() {
        return Err(Error::InvalidInput(format!(
            "s_index {s_index} beyond {} steps",
            mesh.n_steps()
        )));
    }
    if drift.mesh() != mesh || drift.grid() != grid {
        return Err(Error::MeshMismatch(
            "drift field must live on the solver mesh".into(),
        ));
    }
    let a = sigma * sigma;
    let (dx, dt) = (grid.dx(), mesh.dt());
    let w = grid.weights();
    let n_x = grid.len();
    let steps: Vec<BackwardStep> = (0..s_index)
        .map(|n| BackwardStep::new(a, dx, dt, drift.slice(n), bc))
        .collect();
    // columns[ζ][τ][z]
    let columns: Vec<Vec<Vec<f64>>> = (0..n_x)
        .into_par_iter()
        .map(|zeta| -> Result<Vec<Vec<f64>>> {
            let mut col = vec![Vec::new(); s_index + 1];
            let mut delta = vec![0.0; n_x];
            delta[zeta] = 1.0 / w[zeta];
            col[s_index] = delta;
            for n in (0..s_index).rev() {
                col[n] = steps[n].apply(&col[n + 1], None)?;
            }
            Ok(col)
        })
        .collect::<Result<_>>()?;
    let values = (0..=s_index)
        .map(|tau| {
            (0..n_x)
                .map(|z| (0..n_x).map(|zeta| columns[zeta][tau][z]).collect())
                .collect()
        })
        .collect();
    Ok(GreenTable {
        mesh: *mesh,
        grid: *grid,
        s_index,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (TimeMesh, Grid1D) {
        (
            TimeMesh::new(0.0, 0.5, 100).unwrap(),
            Grid1D::new(-8.0, 8.0, 161).unwrap(),
        )
    }

    #[test]
    fn constants_and_linear_functions_are_invariant() {
        let (mesh, grid) = setup();
        for bc in [
            BoundaryPolicy::QuadraticExtrapolation,
            BoundaryPolicy::Neumann,
        ] {
            let c = LinearPDECoefficients::new(
                Coefficient::Zero,
                Coefficient::Zero,
                Terminal::callable(|_| 1.0),
            );
            let psi = solve_backward_linear(&c, 1.0, &mesh, &grid, bc).unwrap();
            assert!(psi.slice(0).iter().all(|v| (v - 1.0).abs() < 1e-12));
        }
        let c = LinearPDECoefficients::new(
            Coefficient::Zero,
            Coefficient::Zero,
            Terminal::callable(|x| x),
        );
        let psi = solve_backward_linear(
            &c,
            1.0,
            &mesh,
            &grid,
            BoundaryPolicy::QuadraticExtrapolation,
        )
        .unwrap();
        for (x, v) in grid.nodes().iter().zip(psi.slice(0)) {
            assert!((v - x).abs() < 1e-10, "{x} {v}");
        }
    }

    #[test]
    fn quadratic_terminal_gains_the_variance() {
        let (mesh, grid) = setup();
        let c = LinearPDECoefficients::new(
            Coefficient::Zero,
            Coefficient::Zero,
            Terminal::callable(|x| x * x),
        );
        let psi = solve_backward_linear(
            &c,
            1.0,
            &mesh,
            &grid,
            BoundaryPolicy::QuadraticExtrapolation,
        )
        .unwrap();
        for (x, v) in grid.nodes().iter().zip(psi.slice(0)) {
            assert!((v - (x * x + 0.5)).abs() < 1e-9, "{x} {v}");
        }
    }

    #[test]
    fn growth_check_rejects_cubic_source() {
        let (mesh, grid) = setup();
        let mut c = LinearPDECoefficients::new(
            Coefficient::Zero,
            Coefficient::callable(|_, x| x * x * x),
            Terminal::callable(|_| 0.0),
        );
        c.growth_bound = Some(2.0);
        assert!(matches!(
            solve_backward_linear(&c, 1.0, &mesh, &grid, BoundaryPolicy::Neumann),
            Err(Error::GrowthViolation { .. })
        ));
    }

    #[test]
    fn forward_flow_conserves_mass_and_spreads() {
        let (mesh, grid) = setup();
        let m0 = GridDensity::gaussian(grid, 0.0, 0.5).unwrap();
        let drift = VectorField::zeros(mesh, grid);
        let flow = solve_forward_fp(
            &drift,
            1.0,
            &mesh,
            &grid,
            &m0,
            BoundaryPolicy::QuadraticExtrapolation,
        )
        .unwrap();
        for s in flow.slices() {
            assert!((s.as_grid().unwrap().mass() - 1.0).abs() < 1e-12);
        }
        let var = crate::measure::moments(flow.last().as_measure(), 2);
        assert!((var - 0.75).abs() < 2e-3, "{var}");
    }

    #[test]
    fn green_table_propagates_constants() {
        let mesh = TimeMesh::new(0.0, 0.2, 20).unwrap();
        let grid = Grid1D::new(-4.0, 4.0, 41).unwrap();
        let drift = VectorField::from_fn(mesh, grid, |_, x| -0.5 * x).unwrap();
        let g = tabulate_green(
            &drift,
            1.0,
            &mesh,
            &grid,
            20,
            BoundaryPolicy::QuadraticExtrapolation,
        )
        .unwrap();
        let ones = vec![1.0; grid.len()];
        for tau in [0, 7, 20] {
            for v in g.integrate_against(tau, &ones) {
                assert!((v - 1.0).abs() < 1e-12);
            }
        }
        let w = grid.weights();
        for z in 0..grid.len() {
            for zeta in 0..grid.len() {
                let expect = if z == zeta { 1.0 } else { 0.0 };
                assert!((w[zeta] * g.values[20][z][zeta] - expect).abs() < 1e-15);
            }
        }
    }
}

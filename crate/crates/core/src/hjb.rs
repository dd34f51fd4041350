//! Backward solve of the HJB equation
//! `−∂V/∂s − (a/2)V'' = H(s,x,V') + dF/dν(m_s)(x)`,
//! `V(T) = h + dF_T/dν(m_T)` for a frozen measure flow.
//!
//! Each step linearizes the Hamiltonian around the gradient of the later
//! slice, `H(p) ≈ H(p*) + D_pH(p*)(p − p*)`, and hands the resulting linear
//! equation to the implicit step of [`crate::pde`].

use crate::error::{Error, Result};
use crate::field::{gradient_slice, second_difference_slice, ScalarField, VectorField};
use crate::grid::{Grid1D, TimeMesh};
use crate::majorant::{self, weighted_norm_slices};
use crate::measure::MeasureFlow;
use crate::model::ModelSpec;
use crate::pde::{BackwardStep, BoundaryPolicy};

/// Without a majorant, |V| beyond this value is treated as blow-up.
pub const HARD_BLOWUP: f64 = 1e12;

/// Blow-up factor relative to the majorant `z`.
pub const MAJORANT_BLOWUP_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct HJBDiagnostics {
    pub max_abs_v: f64,
    pub max_abs_dv: f64,
    /// π_γ-weighted squared space-time norms of ∂V/∂s, D²V and ∂DV/∂s.
    pub weighted_dt_v: f64,
    pub weighted_d2v: f64,
    pub weighted_dt_dv: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HJBSolution {
    pub v: ScalarField,
    pub dv: VectorField,
    pub policy: VectorField,
    pub diagnostics: HJBDiagnostics,
}

#[derive(Debug, Clone, Default)]
pub struct HjbOptions {
    pub bc: BoundaryPolicy,
    /// Majorant `z`; |V| > 10·z aborts with BlowUp. When absent the small-time
    /// majorant is used if the horizon is feasible.
    pub majorant: Option<ScalarField>,
}

/// Solves the HJB equation on `mesh × grid` with the flow frozen.
pub fn solve_hjb(
    model: &ModelSpec,
    flow: &MeasureFlow,
    mesh: &TimeMesh,
    grid: &Grid1D,
    bc: BoundaryPolicy,
) -> Result<HJBSolution> {
    solve_hjb_with(model, flow, mesh, grid, &HjbOptions { bc, majorant: None })
}

pub fn solve_hjb_with(
    model: &ModelSpec,
    flow: &MeasureFlow,
    mesh: &TimeMesh,
    grid: &Grid1D,
    opts: &HjbOptions,
) -> Result<HJBSolution> {
    if flow.mesh() != mesh || !flow.is_complete() {
        return Err(Error::MeshMismatch(
            "the frozen flow must have a slice at every solver mesh node".into(),
        ));
    }
    if grid.len() < 5 {
        return Err(Error::InvalidInput(
            "HJB solver needs at least 5 grid nodes".into(),
        ));
    }
    let majorant = match &opts.majorant {
        Some(z) => {
            if z.mesh() != mesh || z.grid() != grid {
                return Err(Error::MeshMismatch(
                    "majorant field must match the solver mesh".into(),
                ));
            }
            Some(z.clone())
        }
        None => majorant::small_time_majorant(model.constants(), mesh, grid, model.a()).ok(),
    };

    let l = model.local();
    let a = model.a();
    let xs = grid.nodes();
    let (dx, dt) = (grid.dx(), mesh.dt());
    let n_steps = mesh.n_steps();

    let mut v = vec![Vec::new(); n_steps + 1];
    let mut dv = vec![Vec::new(); n_steps + 1];

    let term = model
        .terminal()
        .first_variation(flow.slice(n_steps).as_measure());
    v[n_steps] = xs.iter().map(|&x| l.terminal(x) + term.value(x)).collect();
    dv[n_steps] = xs.iter().map(|&x| l.terminal_dx(x) + term.dx(x)).collect();
    check_slice(
        &v[n_steps],
        mesh.time(n_steps),
        grid,
        majorant.as_ref().map(|z| z.slice(n_steps)),
    )?;

    for n in (0..n_steps).rev() {
        let s = mesh.time(n);
        let coupling = model.running().first_variation(flow.slice(n).as_measure());
        let p_star = &dv[n + 1];
        let mut drift = Vec::with_capacity(xs.len());
        let mut source = Vec::with_capacity(xs.len());
        for (&x, &p) in xs.iter().zip(p_star) {
            let b = l.hamiltonian_dp(s, x, p);
            drift.push(b);
            source.push(l.hamiltonian(s, x, p) - b * p + coupling.value(x));
        }
        let step = BackwardStep::new(a, dx, dt, &drift, opts.bc);
        v[n] = step.apply(&v[n + 1], Some(&source))?;
        check_slice(&v[n], s, grid, majorant.as_ref().map(|z| z.slice(n)))?;
        dv[n] = gradient_slice(&v[n], dx);
    }

    let v = ScalarField::new(*mesh, *grid, v)?;
    let dv = VectorField::new(*mesh, *grid, dv)?;
    let policy = extract_policy(model, &dv)?;
    let diagnostics = diagnostics(&v, &dv, model.constants().gamma);
    Ok(HJBSolution {
        v,
        dv,
        policy,
        diagnostics,
    })
}

fn check_slice(values: &[f64], s: f64, grid: &Grid1D, z: Option<&[f64]>) -> Result<()> {
    for (i, &v) in values.iter().enumerate() {
        let x = grid.node(i);
        if !v.is_finite() {
            return Err(Error::NotFinite { s, x });
        }
        let threshold = z.map_or(HARD_BLOWUP, |z| MAJORANT_BLOWUP_FACTOR * z[i].abs());
        if v.abs() > threshold && v.abs() > 1e-12 {
            return Err(Error::BlowUp {
                s,
                x,
                value: v.abs(),
                threshold,
            });
        }
    }
    Ok(())
}

/// Centered differences in x at interior nodes, one-sided at the ends.
pub fn gradient(v: &ScalarField) -> VectorField {
    let dx = v.grid().dx();
    let values = v
        .values()
        .iter()
        .map(|row| gradient_slice(row, dx))
        .collect();
    VectorField::new(*v.mesh(), *v.grid(), values).expect("gradient of a finite field is finite")
}

/// `v̂(s, x, DV(s, x))` at every node.
pub fn extract_policy(model: &ModelSpec, dv: &VectorField) -> Result<VectorField> {
    let l = model.local();
    let mesh = dv.mesh();
    let grid = dv.grid();
    let mut out = Vec::with_capacity(mesh.n_nodes());
    for n in 0..mesh.n_nodes() {
        let s = mesh.time(n);
        let mut row = Vec::with_capacity(grid.len());
        for (i, &p) in dv.slice(n).iter().enumerate() {
            let x = grid.node(i);
            let u = l.minimizer(s, x, p);
            if !u.is_finite() {
                return Err(Error::MinimizerDomain { s, x, p });
            }
            row.push(u);
        }
        out.push(row);
    }
    VectorField::new(*mesh, *grid, out)
}

fn diagnostics(v: &ScalarField, dv: &VectorField, gamma: f64) -> HJBDiagnostics {
    let mesh = v.mesh();
    let grid = v.grid();
    let dt = mesh.dt();
    let dx = grid.dx();
    let time_diff = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
        rows.windows(2)
            .map(|w| w[1].iter().zip(&w[0]).map(|(a, b)| (a - b) / dt).collect())
            .collect()
    };
    let dt_v = time_diff(v.values());
    let dt_dv = time_diff(dv.values());
    let d2v: Vec<Vec<f64>> = v
        .values()
        .iter()
        .map(|r| second_difference_slice(r, dx))
        .collect();
    HJBDiagnostics {
        max_abs_v: v.max_abs(),
        max_abs_dv: dv.max_abs(),
        weighted_dt_v: weighted_norm_slices(&dt_v, dt, grid, gamma),
        weighted_d2v: weighted_norm_slices(&d2v, dt, grid, gamma),
        weighted_dt_dv: weighted_norm_slices(&dt_dv, dt, grid, gamma),
    }
}

/// Smallest `Ĉ` with `|V(s₂,x) − V(s₁,x)| ≤ Ĉ[(1+|x|)|s₂−s₁|^½ + (1+x²)|s₂−s₁|]`
/// over node pairs at lags 1, 2, 4, ... steps and the core window.
pub fn time_regularity_constant(v: &ScalarField) -> f64 {
    let mesh = v.mesh();
    let grid = v.grid();
    let core = grid.core();
    let mut worst: f64 = 0.0;
    let mut lag = 1;
    while lag <= mesh.n_steps() {
        let ds = lag as f64 * mesh.dt();
        for n in (0..=mesh.n_steps() - lag).step_by(lag.max(1)) {
            for i in core.clone() {
                let x = grid.node(i);
                let bound = (1.0 + x.abs()) * ds.sqrt() + (1.0 + x * x) * ds;
                worst = worst.max((v.at(n + lag, i) - v.at(n, i)).abs() / bound);
            }
        }
        lag *= 2;
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::{GridDensity, MeasureSlice};
    use crate::model::{build_model, AssumptionConstants, BuiltinFamily};

    #[test]
    fn zero_data_gives_zero_value() {
        let model = build_model(
            BuiltinFamily::ColeHopf {
                terminal_curvature: 0.0,
            },
            (0.0, 0.5),
            &[1.0],
            AssumptionConstants::default(),
        )
        .unwrap();
        let mesh = TimeMesh::new(0.0, 0.5, 50).unwrap();
        let grid = Grid1D::new(-4.0, 4.0, 81).unwrap();
        let m = GridDensity::gaussian(grid, 0.0, 1.0).unwrap();
        let flow = MeasureFlow::frozen(mesh, MeasureSlice::Grid(m));
        let sol = solve_hjb(&model, &flow, &mesh, &grid, BoundaryPolicy::default()).unwrap();
        assert_eq!(sol.v.max_abs(), 0.0);
        assert_eq!(sol.policy.max_abs(), 0.0);
    }

    #[test]
    fn gradient_is_exact_on_quadratics() {
        let mesh = TimeMesh::new(0.0, 1.0, 2).unwrap();
        let grid = Grid1D::new(-2.0, 2.0, 21).unwrap();
        let v = ScalarField::from_fn(mesh, grid, |_, x| x * x).unwrap();
        let g = gradient(&v);
        for (x, d) in grid.nodes().iter().zip(g.slice(1)) {
            assert!((d - 2.0 * x).abs() < 1e-12);
        }
    }
}

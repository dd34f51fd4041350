//! Picard iteration `V ↦ m ↦ V` between the HJB solve with a frozen flow and
//! the flow induced by the gradient of `V`.

use std::fmt;

use crate::error::{Error, Result};
use crate::field::{ScalarField, VectorField};
use crate::flow::{self, FlowMethod, MCParams};
use crate::grid::{Grid1D, TimeMesh};
use crate::hjb::{self, HJBSolution, HjbOptions};
use crate::majorant::{self, MajorantMode};
use crate::measure::{GridDensity, MeasureFlow, MeasureSlice};
use crate::model::ModelSpec;
use crate::pde::{self, BoundaryPolicy};

/// Slack `ε(1+x²)` used in the domination flags.
pub const DOMINATION_SLACK: f64 = 5e-3;

/// Damping is never halved below this value.
pub const MIN_DAMPING: f64 = 1.0 / 64.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointConfig {
    pub max_iters: usize,
    /// Tolerance on both the weighted H¹ norm and the core max-norm of
    /// `V_{k+1} − V_k`.
    pub tol_v: f64,
    /// Tolerance on the largest nodewise W₂ distance between successive flows.
    pub tol_w2: f64,
    /// Initial damping θ ∈ (0, 1]; halved whenever the max-norm residual grows.
    pub damping: f64,
    pub flow_method: FlowMethod,
    pub mc: MCParams,
    pub bc: BoundaryPolicy,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            tol_v: 1e-7,
            tol_w2: 1e-7,
            damping: 1.0,
            flow_method: FlowMethod::FpGrid,
            mc: MCParams::default(),
            bc: BoundaryPolicy::default(),
        }
    }
}

impl FixedPointConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol_v > 0.0 && self.tol_w2 > 0.0) {
            return Err(Error::InvalidInput(
                "fixed-point tolerances must be positive".into(),
            ));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "damping {} outside (0, 1]",
                self.damping
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidInput("max_iters must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Converged,
    MaxIters,
    BlowUp,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Converged => "CONVERGED",
            Verdict::MaxIters => "MAX_ITERS",
            Verdict::BlowUp => "BLOWUP",
        })
    }
}

/// One completed iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// `(∫∫ (|δV|² + |DδV|²) π_γ)^½` of `δV = V_{k+1} − V_k`.
    pub weighted_residual: f64,
    /// `max |δV|` on the core window.
    pub max_residual: f64,
    /// Largest W₂ distance between the flows of successive iterations.
    pub w2: f64,
    pub damping: f64,
    /// `|V| ≤ z + ε(1+x²)`; `None` when no majorant is available.
    pub value_dominated: Option<bool>,
    /// `½|DV|² ≤ z̄ + ε(1+x²)`; `None` when no majorant is available.
    pub gradient_dominated: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointReport {
    pub iterations: Vec<IterationRecord>,
    pub verdict: Verdict,
    /// Which majorant regime applies, if any.
    pub majorant_mode: Option<MajorantMode>,
    pub warnings: Vec<String>,
    /// The solver error that ended a BLOWUP run.
    pub failure: Option<Error>,
}

impl FixedPointReport {
    /// True when every recorded iteration carries both domination flags and
    /// the last one passed them.
    pub fn majorant_certified(&self) -> bool {
        self.iterations
            .last()
            .is_some_and(|r| r.value_dominated == Some(true) && r.gradient_dominated == Some(true))
    }

    pub fn last(&self) -> Option<&IterationRecord> {
        self.iterations.last()
    }
}

/// Converged (or last) iterate: `V`, the flow induced by its gradient, and
/// the report.
#[derive(Debug, Clone)]
pub struct MftcSolution {
    pub solution: HJBSolution,
    pub flow: MeasureFlow,
    pub report: FixedPointReport,
}

/// Majorant regime for the model on this mesh: small-time when the horizon
/// fits both windows, global when the model is convex, none otherwise.
fn majorant_regime(model: &ModelSpec, mesh: &TimeMesh) -> Option<MajorantMode> {
    let (wv, wdv) = majorant::feasibility_windows(model.constants());
    let len = mesh.t1() - mesh.t0();
    if len < wv.min(wdv) {
        Some(MajorantMode::SmallTime)
    } else if model.is_convex() {
        // C is fitted per iterate.
        Some(MajorantMode::GlobalConvex { global_c: 1.0 })
    } else {
        None
    }
}

/// `sup |DV|/(1+|x|)` over all nodes.
pub fn gradient_growth(dv: &VectorField) -> f64 {
    let xs = dv.grid().nodes();
    dv.values()
        .iter()
        .flat_map(|row| row.iter().zip(&xs).map(|(p, x)| p.abs() / (1.0 + x.abs())))
        .fold(0.0, f64::max)
}

/// Domination flags of `(V, DV)` against the majorants of `mode`.
pub fn domination_flags(
    model: &ModelSpec,
    v: &ScalarField,
    dv: &VectorField,
    mode: Option<MajorantMode>,
) -> (Option<bool>, Option<bool>) {
    let Some(mode) = mode else {
        return (None, None);
    };
    let mode = match mode {
        MajorantMode::GlobalConvex { .. } => MajorantMode::GlobalConvex {
            global_c: majorant::fit_global_constant(model.constants(), gradient_growth(dv)),
        },
        m => m,
    };
    match majorant::majorant_fields(model.constants(), v.mesh(), v.grid(), model.a(), mode) {
        Ok((z, zb)) => (
            Some(majorant::domination_excess(v, &z, DOMINATION_SLACK) <= 0.0),
            Some(majorant::gradient_domination_excess(dv, &zb, DOMINATION_SLACK) <= 0.0),
        ),
        Err(_) => (None, None),
    }
}

/// `(∫∫ (|f|² + |Df|²) π_γ)^½`.
fn weighted_h1(diff: &ScalarField, gamma: f64) -> f64 {
    let d = hjb::gradient(diff);
    (majorant::weighted_norm_scalar(diff, gamma) + majorant::weighted_norm_vector(&d, gamma)).sqrt()
}

fn difference(a: &ScalarField, b: &ScalarField) -> ScalarField {
    let values = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p - q).collect())
        .collect();
    ScalarField::new(*a.mesh(), *a.grid(), values).expect("difference of finite fields")
}

/// The flow used to freeze the first HJB solve: `m0` diffused with zero drift.
fn diffused_initial_flow(
    model: &ModelSpec,
    m0: &GridDensity,
    mesh: &TimeMesh,
    grid: &Grid1D,
    bc: BoundaryPolicy,
) -> Result<MeasureFlow> {
    let zero = VectorField::zeros(*mesh, *grid);
    pde::solve_forward_fp(&zero, model.sigma(), mesh, grid, m0, bc)
}

/// Solves the mean-field control problem from `m0` on `mesh × grid`.
pub fn solve_mftc(
    model: &ModelSpec,
    m0: &GridDensity,
    mesh: &TimeMesh,
    grid: &Grid1D,
    cfg: &FixedPointConfig,
) -> Result<MftcSolution> {
    let init = diffused_initial_flow(model, m0, mesh, grid, cfg.bc)?;
    solve_mftc_from(model, m0, mesh, grid, cfg, init)
}

/// As [`solve_mftc`], with the first HJB solve frozen at `initial_flow`.
pub fn solve_mftc_from(
    model: &ModelSpec,
    m0: &GridDensity,
    mesh: &TimeMesh,
    grid: &Grid1D,
    cfg: &FixedPointConfig,
    initial_flow: MeasureFlow,
) -> Result<MftcSolution> {
    cfg.validate()?;
    if m0.grid() != grid {
        return Err(Error::MeshMismatch(
            "m0 must live on the solver grid".into(),
        ));
    }
    let mut warnings = Vec::new();
    let regime = majorant_regime(model, mesh);
    if regime.is_none() {
        let msg = format!(
            "horizon {} is outside the feasibility windows and the model is not convex; \
             proceeding without a priori bounds",
            mesh.t1() - mesh.t0()
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let opts = HjbOptions {
        bc: cfg.bc,
        majorant: None,
    };
    let mut mc = cfg.mc;
    if cfg.flow_method != FlowMethod::FpGrid {
        // The HJB solve needs a slice at every node.
        mc.record_every = 1;
    }
    let m0_slice = MeasureSlice::Grid(m0.clone());
    let gamma = model.constants().gamma;
    let core = grid.core();

    let mut current = hjb::solve_hjb_with(model, &initial_flow, mesh, grid, &opts)?;
    let mut flow =
        flow::flow_from_gradient(model, &current.dv, &m0_slice, cfg.flow_method, &mc, cfg.bc)?;
    let mut theta = cfg.damping;
    let mut iterations: Vec<IterationRecord> = Vec::new();
    let mut verdict = Verdict::MaxIters;
    let mut failure = None;

    for k in 0..cfg.max_iters {
        let fresh = match hjb::solve_hjb_with(model, &flow, mesh, grid, &opts) {
            Ok(s) => s,
            Err(e @ (Error::BlowUp { .. } | Error::NotFinite { .. })) => {
                verdict = Verdict::BlowUp;
                failure = Some(e);
                break;
            }
            Err(e) => return Err(e),
        };
        let next = if theta == 1.0 {
            fresh
        } else {
            let v = current.v.blend(&fresh.v, theta);
            let dv = hjb::gradient(&v);
            let policy = hjb::extract_policy(model, &dv)?;
            HJBSolution {
                v,
                dv,
                policy,
                diagnostics: fresh.diagnostics,
            }
        };
        let next_flow = match flow::flow_from_gradient(
            model,
            &next.dv,
            &m0_slice,
            cfg.flow_method,
            &mc,
            cfg.bc,
        ) {
            Ok(f) => f,
            Err(e) => {
                verdict = Verdict::BlowUp;
                failure = Some(e);
                break;
            }
        };
        let diff = difference(&next.v, &current.v);
        let weighted_residual = weighted_h1(&diff, gamma);
        let max_residual = diff
            .values()
            .iter()
            .flat_map(|row| row[core.clone()].iter().map(|d| d.abs()))
            .fold(0.0, f64::max);
        let w2 = next_flow.max_w2(&flow);
        let (value_dominated, gradient_dominated) =
            domination_flags(model, &next.v, &next.dv, regime);
        log::info!(
            "iteration {k}: weighted {weighted_residual:.3e}, core max {max_residual:.3e}, W2 {w2:.3e}, theta {theta}"
        );
        let grew = iterations
            .last()
            .is_some_and(|r| max_residual > r.max_residual);
        iterations.push(IterationRecord {
            iteration: k,
            weighted_residual,
            max_residual,
            w2,
            damping: theta,
            value_dominated,
            gradient_dominated,
        });
        current = next;
        flow = next_flow;
        if weighted_residual < cfg.tol_v && max_residual < cfg.tol_v && w2 < cfg.tol_w2 {
            verdict = Verdict::Converged;
            break;
        }
        if grew && theta > MIN_DAMPING {
            theta *= 0.5;
        }
    }

    Ok(MftcSolution {
        solution: current,
        flow,
        report: FixedPointReport {
            iterations,
            verdict,
            majorant_mode: regime,
            warnings,
            failure,
        },
    })
}

/// Restarts the problem at mesh node `tau_index` from the flow slice there
/// and returns the largest discrepancy with `solution.v` on `[τ, T]` over
/// the core window.
pub fn flow_property_check(
    model: &ModelSpec,
    solution: &HJBSolution,
    flow: &MeasureFlow,
    tau_index: usize,
    cfg: &FixedPointConfig,
) -> Result<f64> {
    let mesh = solution.v.mesh();
    let grid = solution.v.grid();
    let m_tau = flow
        .at_node(tau_index)
        .and_then(|s| s.as_grid())
        .ok_or_else(|| Error::InvalidInput("restart needs a grid density at tau".into()))?;
    let sub_mesh = mesh.tail(tau_index)?;
    let restarted_model = model.with_horizon(sub_mesh.t0(), sub_mesh.t1())?;
    let restarted = solve_mftc(&restarted_model, m_tau, &sub_mesh, grid, cfg)?;
    let core = grid.core();
    let mut worst: f64 = 0.0;
    for n in 0..sub_mesh.n_nodes() {
        let a = restarted.solution.v.slice(n);
        let b = solution.v.slice(n + tau_index);
        for i in core.clone() {
            worst = worst.max((a[i] - b[i]).abs());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, AssumptionConstants, BuiltinFamily};

    #[test]
    fn decoupled_problem_converges_in_one_step() {
        let model = build_model(
            BuiltinFamily::ColeHopf {
                terminal_curvature: 1.0,
            },
            (0.0, 0.2),
            &[1.0],
            AssumptionConstants::default(),
        )
        .unwrap();
        let mesh = TimeMesh::new(0.0, 0.2, 40).unwrap();
        let grid = Grid1D::new(-8.0, 8.0, 161).unwrap();
        let m0 = GridDensity::gaussian(grid, 0.0, 0.5).unwrap();
        let out = solve_mftc(&model, &m0, &mesh, &grid, &FixedPointConfig::default()).unwrap();
        assert_eq!(out.report.verdict, Verdict::Converged);
        assert_eq!(out.report.iterations.len(), 1);
        assert_eq!(out.report.iterations[0].max_residual, 0.0);
    }

    #[test]
    fn config_validation() {
        let mut c = FixedPointConfig {
            damping: 0.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c.damping = 1.5;
        assert!(c.validate().is_err());
        c.damping = 0.5;
        c.tol_v = 0.0;
        assert!(c.validate().is_err());
    }
}

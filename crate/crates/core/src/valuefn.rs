//! Value-level objects built on a solved problem: the value `Φ(t, m)`,
//! Monte-Carlo costs of feedback controls, the directional derivative of
//! `Φ`, the derivative field `V̄(s, x, z) = dV(s, x)/dν(m)(z)` and the
//! residual of the master equation at a fixed measure.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{gradient_slice, gradient_transpose, second_difference_slice, VectorField};
use crate::fixedpoint::{self, FixedPointConfig};
use crate::flow::MCParams;
use crate::grid::{Grid1D, TimeMesh};
use crate::hjb::HJBSolution;
use crate::measure::{GridDensity, InverseCdf, Measure, MeasureFlow, ParticleEnsemble};
use crate::model::{MeanFieldTerm, ModelSpec};
use crate::oracle::{mean_and_stderr, Estimate};
use crate::pde::{
    self, BackwardStep, BoundaryPolicy, Coefficient, GreenTable, LinearPDECoefficients, Terminal,
};
use crate::rng::{self, Purpose};

/// Inner iterations for `V̄` stop below this change.
pub const INNER_TOLERANCE: f64 = 1e-6;
pub const INNER_MAX_ITERS: usize = 200;
pub const INNER_DAMPING: f64 = 0.5;

/// Batches used for the standard error of Monte-Carlo costs.
pub const COST_BATCHES: usize = 20;

/// `Φ = ∫ₜᵀ running ds + terminal`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueRecord {
    pub phi: f64,
    /// `∫ l(s, x, v̂(s, x, DV)) dm_s + F(m_s)` at every mesh node.
    pub running: Vec<f64>,
    /// Trapezoid integral of `running`.
    pub running_total: f64,
    /// `∫ h dm_T + F_T(m_T)`.
    pub terminal: f64,
}

/// Evaluates `Φ(t, m)` along a solved pair `(V, m)`.
pub fn value_from_solution(
    model: &ModelSpec,
    solution: &HJBSolution,
    flow: &MeasureFlow,
) -> Result<ValueRecord> {
    let mesh = solution.v.mesh();
    let grid = *solution.v.grid();
    if flow.mesh() != mesh || !flow.is_complete() {
        return Err(Error::MeshMismatch(
            "flow must cover every node of the solution mesh".into(),
        ));
    }
    let l = model.local();
    let running: Vec<f64> = (0..mesh.n_nodes())
        .map(|n| {
            let s = mesh.time(n);
            let m = flow.slice(n).as_measure();
            let policy = solution.policy.slice(n);
            let cost = m.integrate(&|x| l.running_cost(s, x, grid.interpolate(policy, x)));
            cost + model.running().value(m)
        })
        .collect();
    let running_total = mesh.integrate(&running);
    let m_t = flow.last().as_measure();
    let terminal = m_t.integrate(&|x| l.terminal(x)) + model.terminal().value(m_t);
    Ok(ValueRecord {
        phi: running_total + terminal,
        running,
        running_total,
        terminal,
    })
}

fn check_policy(policy: &VectorField, mc: &MCParams) -> Result<()> {
    if mc.n_particles < 2 * COST_BATCHES || mc.substeps == 0 {
        return Err(Error::InvalidInput(format!(
            "cost estimates need at least {} particles and one substep",
            2 * COST_BATCHES
        )));
    }
    if policy.mesh().n_steps() == 0 {
        return Err(Error::InvalidInput("policy mesh has no steps".into()));
    }
    Ok(())
}

/// `v(s, x)`, linear in time between nodes and in space.
fn control_at(policy: &VectorField, n: usize, frac: f64, x: f64) -> f64 {
    let g = policy.grid();
    let v0 = g.interpolate(policy.slice(n), x);
    if frac == 0.0 || n == policy.mesh().n_steps() {
        return v0;
    }
    v0 + frac * (g.interpolate(policy.slice(n + 1), x) - v0)
}

/// Mean-field cost of the weighted empirical measure, overall and per batch.
fn mean_field_costs(term: &dyn MeanFieldTerm, x: &[f64], w: &[f64]) -> Result<(f64, Vec<f64>)> {
    let full = term.value(&ParticleEnsemble::new(x.to_vec(), w.to_vec(), 0)?);
    let mut batches = Vec::with_capacity(COST_BATCHES);
    for b in 0..COST_BATCHES {
        let xb: Vec<f64> = x.iter().skip(b).step_by(COST_BATCHES).copied().collect();
        let wb: Vec<f64> = w.iter().skip(b).step_by(COST_BATCHES).copied().collect();
        batches.push(term.value(&ParticleEnsemble::new(xb, wb, 0)?));
    }
    Ok((full, batches))
}

/// Combines per-path costs and mean-field costs into an estimate whose
/// standard error comes from batch means.
fn batched_estimate(
    per_path: &[f64],
    weights: &[f64],
    mf_full: f64,
    mf_batches: &[f64],
) -> Estimate {
    let total_w: f64 = weights.iter().sum();
    let path_mean: f64 = per_path
        .iter()
        .zip(weights)
        .map(|(c, w)| c * w)
        .sum::<f64>()
        / total_w;
    let batch_values: Vec<f64> = (0..COST_BATCHES)
        .map(|b| {
            let (mut s, mut ws) = (0.0, 0.0);
            for i in (b..per_path.len()).step_by(COST_BATCHES) {
                s += per_path[i] * weights[i];
                ws += weights[i];
            }
            s / ws + mf_batches[b]
        })
        .collect();
    let batch = mean_and_stderr(&batch_values);
    Estimate {
        value: path_mean + mf_full,
        stderr: batch.stderr,
    }
}

fn sample_initial(m0: &GridDensity, n: usize, seed: u64, purpose: Purpose) -> Vec<f64> {
    let inv = InverseCdf::new(m0);
    (0..n)
        .into_par_iter()
        .map(|i| {
            // Stream 2·i for the initial draw, 2·i + 1 for the path noise.
            let mut r = rng::stream(seed, purpose, 2 * i as u64);
            inv.sample(rng::uniform(&mut r))
        })
        .collect()
}

/// Monte-Carlo cost of the feedback control `policy` by Euler simulation of
/// `dX = v(s, X) ds + σ dw`, `X_t ~ m₀`. Running costs use the trapezoid rule
/// on mesh nodes; mean-field costs use the empirical measure at each node.
pub fn mc_cost(
    model: &ModelSpec,
    policy: &VectorField,
    m0: &GridDensity,
    mc: &MCParams,
) -> Result<Estimate> {
    check_policy(policy, mc)?;
    let mesh = *policy.mesh();
    let l = model.local();
    let sigma = model.sigma();
    let n = mc.n_particles;
    let k = mc.substeps;
    let h = mesh.dt() / k as f64;
    let sqh = h.sqrt();
    let mut x = sample_initial(m0, n, mc.seed, Purpose::ControlledCost);
    let mut rngs: Vec<_> = (0..n)
        .map(|i| rng::stream(mc.seed, Purpose::ControlledCost, 2 * i as u64 + 1))
        .collect();
    let w = vec![1.0; n];
    let mut cost = vec![0.0; n];
    let mut mf_full = 0.0;
    let mut mf_batches = vec![0.0; COST_BATCHES];
    for step in 0..=mesh.n_steps() {
        let s = mesh.time(step);
        let weight = if step == 0 || step == mesh.n_steps() {
            0.5
        } else {
            1.0
        } * mesh.dt();
        cost.par_iter_mut().zip(&x).for_each(|(c, &xi)| {
            *c += weight * l.running_cost(s, xi, control_at(policy, step, 0.0, xi));
        });
        let (f, fb) = mean_field_costs(model.running(), &x, &w)?;
        mf_full += weight * f;
        for (a, b) in mf_batches.iter_mut().zip(fb) {
            *a += weight * b;
        }
        if step == mesh.n_steps() {
            break;
        }
        x.par_iter_mut()
            .zip(rngs.par_iter_mut())
            .for_each(|(xi, r)| {
                for j in 0..k {
                    let v = control_at(policy, step, j as f64 / k as f64, *xi);
                    *xi += v * h + sigma * sqh * rng::normal(r);
                }
            });
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NotFinite {
            s: mesh.t1(),
            x: x[i],
        });
    }
    for (c, &xi) in cost.iter_mut().zip(&x) {
        *c += l.terminal(xi);
    }
    let (f, fb) = mean_field_costs(model.terminal(), &x, &w)?;
    mf_full += f;
    for (a, b) in mf_batches.iter_mut().zip(fb) {
        *a += b;
    }
    Ok(batched_estimate(&cost, &w, mf_full, &mf_batches))
}

/// Cost of `policy` by reweighting driftless paths `x + σ(w_s − w_t)` with
/// the Girsanov density of the drift `v`. WeightDegenerate when the ESS of
/// the final weights drops below 1% of N.
pub fn mc_cost_reweighted(
    model: &ModelSpec,
    policy: &VectorField,
    m0: &GridDensity,
    mc: &MCParams,
) -> Result<Estimate> {
    check_policy(policy, mc)?;
    let mesh = *policy.mesh();
    let l = model.local();
    let sigma = model.sigma();
    let n = mc.n_particles;
    let k = mc.substeps;
    let h = mesh.dt() / k as f64;
    let sqh = h.sqrt();
    let mut x = sample_initial(m0, n, mc.seed, Purpose::ReweightedCost);
    let mut rngs: Vec<_> = (0..n)
        .map(|i| rng::stream(mc.seed, Purpose::ReweightedCost, 2 * i as u64 + 1))
        .collect();
    let mut log_m = vec![0.0f64; n];
    let mut cost = vec![0.0; n];
    let mut mf_full = 0.0;
    let mut mf_batches = vec![0.0; COST_BATCHES];
    let check_ess = |log_m: &[f64], node: usize| -> Result<Vec<f64>> {
        let top = log_m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = log_m.iter().map(|v| (v - top).exp()).collect();
        let total: f64 = w.iter().sum();
        let ess = total * total / w.iter().map(|v| v * v).sum::<f64>();
        if ess < crate::flow::MIN_ESS_FRACTION * n as f64 {
            return Err(Error::WeightDegenerate {
                node,
                ess,
                threshold: crate::flow::MIN_ESS_FRACTION * n as f64,
            });
        }
        Ok(w)
    };
    for step in 0..=mesh.n_steps() {
        let s = mesh.time(step);
        let weight = if step == 0 || step == mesh.n_steps() {
            0.5
        } else {
            1.0
        } * mesh.dt();
        // M_s·l(s, X_s, v) is an unbiased stand-in for the running cost at s.
        cost.par_iter_mut()
            .zip(&x)
            .zip(&log_m)
            .for_each(|((c, &xi), lm)| {
                *c += weight * lm.exp() * l.running_cost(s, xi, control_at(policy, step, 0.0, xi));
            });
        let w = check_ess(&log_m, step)?;
        let (f, fb) = mean_field_costs(model.running(), &x, &w)?;
        mf_full += weight * f;
        for (a, b) in mf_batches.iter_mut().zip(fb) {
            *a += weight * b;
        }
        if step == mesh.n_steps() {
            break;
        }
        x.par_iter_mut()
            .zip(log_m.par_iter_mut())
            .zip(rngs.par_iter_mut())
            .for_each(|((xi, lm), r)| {
                for j in 0..k {
                    let g = control_at(policy, step, j as f64 / k as f64, *xi) / sigma;
                    let dw = sqh * rng::normal(r);
                    *lm += g * dw - 0.5 * g * g * h;
                    *xi += sigma * dw;
                }
            });
    }
    for ((c, &xi), lm) in cost.iter_mut().zip(&x).zip(&log_m) {
        *c += lm.exp() * l.terminal(xi);
    }
    let w = check_ess(&log_m, mesh.n_steps())?;
    let (f, fb) = mean_field_costs(model.terminal(), &x, &w)?;
    mf_full += f;
    for (a, b) in mf_batches.iter_mut().zip(fb) {
        *a += b;
    }
    // Per-path costs already carry M; average them with unit weights.
    Ok(batched_estimate(&cost, &vec![1.0; n], mf_full, &mf_batches))
}

/// Outcome of the directional-derivative identity check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivativeCheck {
    /// `(Φ(t, (I+εX)#m) − Φ(t, (I−εX)#m)) / 2ε`.
    pub finite_difference: f64,
    /// `∫ DV(t, x)·X(x) dm(x)`.
    pub integral: f64,
    pub discrepancy: f64,
}

/// Compares a central difference of `Φ` along the pushforward `(I + εX)#m`
/// with `∫ DV·X dm`. Each side of the difference is a full re-solve.
pub fn value_derivative_check(
    model: &ModelSpec,
    solution: &HJBSolution,
    flow: &MeasureFlow,
    direction: impl Fn(f64) -> f64 + Sync,
    eps: f64,
    cfg: &FixedPointConfig,
) -> Result<DerivativeCheck> {
    if !(eps > 0.0) {
        return Err(Error::InvalidInput("eps must be positive".into()));
    }
    let m0 = flow
        .first()
        .as_grid()
        .ok_or_else(|| Error::InvalidInput("derivative check needs a grid density".into()))?;
    let mesh = solution.v.mesh();
    let grid = solution.v.grid();
    let dv0 = solution.dv.slice(0);
    let integrand: Vec<f64> = grid
        .nodes()
        .iter()
        .zip(dv0)
        .zip(m0.values())
        .map(|((&x, &p), &m)| p * direction(x) * m)
        .collect();
    let integral = grid.integrate(&integrand);
    let phi_at = |e: f64| -> Result<f64> {
        let shifted = m0.pushforward_monotone(|x| x + e * direction(x))?;
        let out = fixedpoint::solve_mftc(model, &shifted, mesh, grid, cfg)?;
        Ok(value_from_solution(model, &out.solution, &out.flow)?.phi)
    };
    let finite_difference = (phi_at(eps)? - phi_at(-eps)?) / (2.0 * eps);
    Ok(DerivativeCheck {
        finite_difference,
        integral,
        discrepancy: (finite_difference - integral).abs(),
    })
}

/// `V̄(s, x, z)` on `mesh × coarse x-grid × z-points`, plus the fine slice at
/// `s = t` for every `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeField {
    pub mesh: TimeMesh,
    /// Coarse x-grid of `vbar` (every `stride`-th node of the solver grid).
    pub grid_x: Grid1D,
    pub grid_z: Vec<f64>,
    /// `vbar[n][i][j] = V̄(s_n, x_i, z_j)`.
    pub vbar: Vec<Vec<Vec<f64>>>,
    /// `initial[j]` is `V̄(t, ·, z_j)` on the solver grid.
    pub initial: Vec<Vec<f64>>,
    /// Largest inner-iteration change per sweep (max over z).
    pub inner_history: Vec<f64>,
    /// Largest contribution of the flow-response coupling, i.e. of the
    /// terms beyond transport of the initial perturbation.
    pub coupling_share: f64,
}

impl DerivativeField {
    /// `V̄(s_n, x, z_j)` by linear interpolation in x.
    pub fn at(&self, n: usize, x: f64, j: usize) -> f64 {
        let col: Vec<f64> = self.vbar[n].iter().map(|row| row[j]).collect();
        self.grid_x.interpolate(&col, x)
    }

    /// `V̄(x, z) − V̄(x, 0) − V̄(0, z) + V̄(0, 0)` at time node `n`, removing
    /// the parts that depend on one variable only (dU/dν is defined up to
    /// those). Requires `0` among the z-points.
    pub fn double_centered(&self, n: usize, x: f64, j: usize) -> Option<f64> {
        let j0 = self.grid_z.iter().position(|&z| z == 0.0)?;
        Some(self.at(n, x, j) - self.at(n, x, j0) - self.at(n, 0.0, j) + self.at(n, 0.0, j0))
    }

    /// `max |V̄c(s, z_i, z_j) − V̄c(s, z_j, z_i)|` over z-points in `[lo, hi]`
    /// and all time nodes, on the double-centered field (`centered`) or the
    /// raw one.
    pub fn symmetry_defect(&self, lo: f64, hi: f64, centered: bool) -> f64 {
        let idx: Vec<usize> = (0..self.grid_z.len())
            .filter(|&j| self.grid_z[j] >= lo && self.grid_z[j] <= hi)
            .collect();
        let mut worst: f64 = 0.0;
        for n in 0..self.vbar.len() {
            for &i in &idx {
                for &j in &idx {
                    let (a, b) = if centered {
                        match (
                            self.double_centered(n, self.grid_z[i], j),
                            self.double_centered(n, self.grid_z[j], i),
                        ) {
                            (Some(a), Some(b)) => (a, b),
                            _ => return f64::NAN,
                        }
                    } else {
                        (self.at(n, self.grid_z[i], j), self.at(n, self.grid_z[j], i))
                    };
                    worst = worst.max((a - b).abs());
                }
            }
        }
        worst
    }

    /// Least-squares coefficient `α` of `x·z` at node `n`, over x in the
    /// core window `[lo, hi]`.
    pub fn bilinear_coefficient(&self, n: usize, lo: f64, hi: f64) -> f64 {
        let xr = self.grid_x.window(lo, hi);
        let xs: Vec<f64> = xr.clone().map(|i| self.grid_x.node(i)).collect();
        // Slope in x of each column, then the slope of those in z.
        let slopes: Vec<f64> = (0..self.grid_z.len())
            .map(|j| {
                let ys: Vec<f64> = xr.clone().map(|i| self.vbar[n][i][j]).collect();
                crate::quad::quadratic_fit(&xs, &ys)[1]
            })
            .collect();
        let zm = self.grid_z.iter().sum::<f64>() / self.grid_z.len() as f64;
        let sm = slopes.iter().sum::<f64>() / slopes.len() as f64;
        let num: f64 = self
            .grid_z
            .iter()
            .zip(&slopes)
            .map(|(z, s)| (z - zm) * (s - sm))
            .sum();
        let den: f64 = self.grid_z.iter().map(|z| (z - zm) * (z - zm)).sum();
        num / den
    }
}

/// Shared data of the linearized forward–backward system around `(V, m)`.
struct Linearization {
    mesh: TimeMesh,
    grid: Grid1D,
    coarse: Grid1D,
    stride: usize,
    weights: Vec<f64>,
    steps: Vec<BackwardStep>,
    /// `m_n(ζ)·D²_pH(s_n, ζ, DV_n(ζ))`.
    response_coeff: Vec<Vec<f64>>,
    /// `d²F/dν²(m_n)(x_c, ζ)` for running nodes (empty when F is affine).
    running_kernel: Vec<Vec<Vec<f64>>>,
    /// `d²F_T/dν²(m_T)(x, ζ)` on the solver grid (empty when F_T is affine).
    terminal_kernel: Vec<Vec<f64>>,
}

const COARSE_STRIDE: usize = 5;

fn kernel(
    term: &dyn MeanFieldTerm,
    m: &dyn Measure,
    xs: &[f64],
    zetas: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let k = term.second_variation(m).ok_or_else(|| {
        Error::Unsupported("the mean-field term does not provide a second variation".into())
    })?;
    Ok(xs
        .iter()
        .map(|&x| zetas.iter().map(|&z| k.value(x, z)).collect())
        .collect())
}

impl Linearization {
    fn new(
        model: &ModelSpec,
        solution: &HJBSolution,
        flow: &MeasureFlow,
        bc: BoundaryPolicy,
    ) -> Result<Self> {
        let mesh = *solution.v.mesh();
        let grid = *solution.v.grid();
        if flow.mesh() != &mesh || !flow.is_complete() || flow.first().as_grid().is_none() {
            return Err(Error::MeshMismatch(
                "derivative fields need a complete grid flow on the solution mesh".into(),
            ));
        }
        let stride = if (grid.len() - 1) % COARSE_STRIDE == 0 {
            COARSE_STRIDE
        } else {
            1
        };
        let coarse = grid.coarsen(stride)?;
        let l = model.local();
        let xs = grid.nodes();
        let xc = coarse.nodes();
        let a = model.a();
        let steps = (0..mesh.n_steps())
            .map(|n| {
                let s = mesh.time(n);
                let drift: Vec<f64> = solution
                    .dv
                    .slice(n)
                    .iter()
                    .zip(&xs)
                    .map(|(&p, &x)| l.hamiltonian_dp(s, x, p))
                    .collect();
                BackwardStep::new(a, grid.dx(), mesh.dt(), &drift, bc)
            })
            .collect();
        let response_coeff = (0..mesh.n_nodes())
            .map(|n| {
                let s = mesh.time(n);
                let m = flow.slice(n).as_grid().expect("grid flow").values();
                solution
                    .dv
                    .slice(n)
                    .iter()
                    .zip(&xs)
                    .zip(m)
                    .map(|((&p, &x), &mv)| mv * l.hamiltonian_dpp(s, x, p))
                    .collect()
            })
            .collect();
        let running_kernel = if model.running().is_linear() {
            Vec::new()
        } else {
            (0..mesh.n_steps())
                .into_par_iter()
                .map(|n| kernel(model.running(), flow.slice(n).as_measure(), &xc, &xs))
                .collect::<Result<_>>()?
        };
        let terminal_kernel = if model.terminal().is_linear() {
            Vec::new()
        } else {
            kernel(model.terminal(), flow.last().as_measure(), &xs, &xs)?
        };
        Ok(Self {
            mesh,
            grid,
            coarse,
            stride,
            weights: grid.weights(),
            steps,
            response_coeff,
            running_kernel,
            terminal_kernel,
        })
    }

    fn is_trivial(&self) -> bool {
        self.running_kernel.is_empty() && self.terminal_kernel.is_empty()
    }

    fn pair(&self, kernel: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
        kernel
            .iter()
            .map(|row| {
                row.iter()
                    .zip(y)
                    .zip(&self.weights)
                    .map(|((k, v), w)| k * v * w)
                    .sum()
            })
            .collect()
    }

    /// Forward response of the flow to the initial perturbation `y0` when the
    /// gradient moves by `dvbar` (`None`: pure transport).
    fn forward(&self, y0: &[f64], dvbar: Option<&[Vec<f64>]>) -> Result<Vec<Vec<f64>>> {
        let dx = self.grid.dx();
        let dt = self.mesh.dt();
        let mut ys = Vec::with_capacity(self.mesh.n_nodes());
        ys.push(y0.to_vec());
        for n in 0..self.mesh.n_steps() {
            let mut y = ys[n].clone();
            if let Some(v) = dvbar {
                let d = gradient_slice(&v[n], dx);
                // k = m·D²_pH·D_ζV̄ enters as −div k, i.e. W⁻¹DᵀW k.
                let k: Vec<f64> = d
                    .iter()
                    .zip(&self.response_coeff[n])
                    .zip(&self.weights)
                    .map(|((g, c), w)| g * c * w)
                    .collect();
                let div = gradient_transpose(&k, dx);
                for ((yi, di), w) in y.iter_mut().zip(div).zip(&self.weights) {
                    *yi += dt * di / w;
                }
            }
            ys.push(self.steps[n].forward_density(&y, &self.weights)?);
        }
        Ok(ys)
    }

    /// Backward solve of the linearized HJB equation with the sources
    /// generated by the response `ys`.
    fn backward(&self, ys: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let n_steps = self.mesh.n_steps();
        let nx = self.grid.len();
        let mut v = vec![Vec::new(); n_steps + 1];
        v[n_steps] = if self.terminal_kernel.is_empty() {
            vec![0.0; nx]
        } else {
            self.pair(&self.terminal_kernel, &ys[n_steps])
        };
        let xs = self.grid.nodes();
        for n in (0..n_steps).rev() {
            let source = if self.running_kernel.is_empty() {
                None
            } else {
                let coarse = self.pair(&self.running_kernel[n], &ys[n]);
                Some(if self.stride == 1 {
                    coarse
                } else {
                    xs.iter()
                        .map(|&x| self.coarse.interpolate(&coarse, x))
                        .collect()
                })
            };
            v[n] = self.steps[n].apply(&v[n + 1], source.as_deref())?;
        }
        Ok(v)
    }

    /// Damped inner iteration for the response to `y0`; returns the fine
    /// field, the change history and the coupling share.
    fn solve(&self, y0: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<f64>, f64)> {
        let transport = self.backward(&self.forward(y0, None)?)?;
        let mut current = transport.clone();
        let mut history = Vec::new();
        for _ in 0..INNER_MAX_ITERS {
            let fresh = self.backward(&self.forward(y0, Some(&current))?)?;
            let mut change: f64 = 0.0;
            for (c, f) in current.iter_mut().zip(&fresh) {
                for (a, b) in c.iter_mut().zip(f) {
                    let next = (1.0 - INNER_DAMPING) * *a + INNER_DAMPING * b;
                    change = change.max((next - *a).abs());
                    *a = next;
                }
            }
            history.push(change);
            if change < INNER_TOLERANCE {
                let share = current
                    .iter()
                    .zip(&transport)
                    .flat_map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q).abs()))
                    .fold(0.0, f64::max);
                return Ok((current, history, share));
            }
        }
        Err(Error::InnerNonConvergence { history })
    }

    /// Discrete point mass at `z` (hat weights on the two nearest nodes,
    /// divided by the trapezoid weights).
    fn point_mass(&self, z: f64) -> Result<Vec<f64>> {
        let g = &self.grid;
        if z < g.x_min() || z > g.x_max() {
            return Err(Error::InvalidInput(format!("z = {z} outside the grid")));
        }
        let t = (z - g.x_min()) / g.dx();
        let i = (t.floor() as usize).min(g.len() - 2);
        let frac = t - i as f64;
        let mut y = vec![0.0; g.len()];
        y[i] += (1.0 - frac) / self.weights[i];
        y[i + 1] += frac / self.weights[i + 1];
        Ok(y)
    }
}

/// Default z-points: `[−4, 4]` with 17 points.
pub fn default_grid_z() -> Vec<f64> {
    (0..17).map(|j| -4.0 + 0.5 * j as f64).collect()
}

/// Solves the linearized system for `V̄(·, ·, z)` column by column.
pub fn solve_vbar(
    model: &ModelSpec,
    solution: &HJBSolution,
    flow: &MeasureFlow,
    grid_z: &[f64],
    bc: BoundaryPolicy,
) -> Result<DerivativeField> {
    if model.dim() != 1 {
        return Err(Error::Unsupported(
            "derivative fields are one-dimensional".into(),
        ));
    }
    let lin = Linearization::new(model, solution, flow, bc)?;
    let nt = lin.mesh.n_nodes();
    let nc = lin.coarse.len();
    if lin.is_trivial() {
        return Ok(DerivativeField {
            mesh: lin.mesh,
            grid_x: lin.coarse,
            grid_z: grid_z.to_vec(),
            vbar: vec![vec![vec![0.0; grid_z.len()]; nc]; nt],
            initial: vec![vec![0.0; lin.grid.len()]; grid_z.len()],
            inner_history: Vec::new(),
            coupling_share: 0.0,
        });
    }
    let columns: Vec<(Vec<Vec<f64>>, Vec<f64>, f64)> = grid_z
        .par_iter()
        .map(|&z| lin.solve(&lin.point_mass(z)?))
        .collect::<Result<_>>()?;
    let mut vbar = vec![vec![vec![0.0; grid_z.len()]; nc]; nt];
    let mut initial = Vec::with_capacity(grid_z.len());
    let mut inner_history: Vec<f64> = Vec::new();
    let mut coupling_share: f64 = 0.0;
    for (j, (field, hist, share)) in columns.into_iter().enumerate() {
        for (n, row) in field.iter().enumerate() {
            for (i, cell) in vbar[n].iter_mut().enumerate() {
                cell[j] = row[i * lin.stride];
            }
        }
        if inner_history.len() < hist.len() {
            inner_history.resize(hist.len(), 0.0);
        }
        for (a, b) in inner_history.iter_mut().zip(&hist) {
            *a = a.max(*b);
        }
        coupling_share = coupling_share.max(share);
        initial.push(field.into_iter().next().unwrap());
    }
    Ok(DerivativeField {
        mesh: lin.mesh,
        grid_x: lin.coarse,
        grid_z: grid_z.to_vec(),
        vbar,
        initial,
        inner_history,
        coupling_share,
    })
}

/// `∫ V̄(s, x, z) μ(dz)` for a signed density `μ` on the solver grid, at
/// every node of the solver mesh.
pub fn vbar_response(
    model: &ModelSpec,
    solution: &HJBSolution,
    flow: &MeasureFlow,
    mu: &[f64],
    bc: BoundaryPolicy,
) -> Result<Vec<Vec<f64>>> {
    let lin = Linearization::new(model, solution, flow, bc)?;
    if mu.len() != lin.grid.len() {
        return Err(Error::MeshMismatch(
            "perturbation must live on the solver grid".into(),
        ));
    }
    if lin.is_trivial() {
        return Ok(vec![vec![0.0; lin.grid.len()]; lin.mesh.n_nodes()]);
    }
    Ok(lin.solve(mu)?.0)
}

/// `Ψ(τ, z) = ∫ G(τ, z; s, ζ) k(ζ) dζ` for a tabulated Green function.
pub fn psi_from_green(green: &GreenTable, kernel: &[f64]) -> Vec<Vec<f64>> {
    (0..=green.s_index)
        .map(|tau| green.integrate_against(tau, kernel))
        .collect()
}

/// The same `Ψ` by a direct backward solve with terminal data `k` at `s`.
pub fn psi_direct(
    drift: &VectorField,
    sigma: f64,
    s_index: usize,
    kernel: &[f64],
    bc: BoundaryPolicy,
) -> Result<Vec<Vec<f64>>> {
    let mesh = drift.mesh().head(s_index)?;
    let coeffs = LinearPDECoefficients::new(
        Coefficient::Nodal(drift.values()[..=s_index].to_vec()),
        Coefficient::Zero,
        Terminal::Nodal(kernel.to_vec()),
    );
    Ok(pde::solve_backward_linear(&coeffs, sigma, &mesh, drift.grid(), bc)?.into_values())
}

/// Residual of the master equation at `s = t`, `m = m₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct MasterResidual {
    pub probes: Vec<f64>,
    pub residuals: Vec<f64>,
    pub dx: f64,
    pub dt: f64,
}

impl MasterResidual {
    pub fn max_abs(&self) -> f64 {
        self.residuals.iter().fold(0.0, |a, r| a.max(r.abs()))
    }
}

/// Evaluates
/// `−∂_sU − (a/2)D²U − ∫ V̄(t, x, ξ) ∂_s m_t(dξ) − H(x, DU) − dF/dν(m₀)(x)`
/// at the probes, where `U(s, x, m) = V^{m,s}(s, x)`. `∂_sU` is a one-sided
/// difference of re-solves started at `t` and `t + Δt` from the same `m₀`;
/// the measure terms are one linear response with initial perturbation
/// `∂_s m_t`, the first step of the discrete forward flow.
pub fn master_residual(
    model: &ModelSpec,
    m0: &GridDensity,
    mesh: &TimeMesh,
    grid: &Grid1D,
    cfg: &FixedPointConfig,
    probes: &[f64],
) -> Result<MasterResidual> {
    let base = fixedpoint::solve_mftc(model, m0, mesh, grid, cfg)?;
    let later_mesh = mesh.tail(1)?;
    let later_model = model.with_horizon(later_mesh.t0(), later_mesh.t1())?;
    let later = fixedpoint::solve_mftc(&later_model, m0, &later_mesh, grid, cfg)?;
    let dt = mesh.dt();
    let dx = grid.dx();
    let u0 = base.solution.v.slice(0);
    let u1 = later.solution.v.slice(0);
    let m1 = base
        .flow
        .slice(1)
        .as_grid()
        .ok_or_else(|| Error::InvalidInput("master residual needs a grid flow".into()))?;
    let mu: Vec<f64> = m1
        .values()
        .iter()
        .zip(m0.values())
        .map(|(a, b)| (a - b) / dt)
        .collect();
    let response = vbar_response(model, &base.solution, &base.flow, &mu, cfg.bc)?;
    let du = gradient_slice(u0, dx);
    let d2u = second_difference_slice(u0, dx);
    let t = mesh.t0();
    let l = model.local();
    let coupling = model.running().first_variation(m0);
    let a = model.a();
    let residual: Vec<f64> = grid
        .nodes()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let ds_u = (u1[i] - u0[i]) / dt;
            -ds_u
                - 0.5 * a * d2u[i]
                - response[0][i]
                - l.hamiltonian(t, x, du[i])
                - coupling.value(x)
        })
        .collect();
    let residuals = probes
        .iter()
        .map(|&x| grid.interpolate(&residual, x))
        .collect();
    Ok(MasterResidual {
        probes: probes.to_vec(),
        residuals,
        dx,
        dt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixedpoint::solve_mftc;
    use crate::model::{build_model, AssumptionConstants, BuiltinFamily};

    fn setup(q: f64, qt: f64, h: f64) -> (ModelSpec, GridDensity, TimeMesh, Grid1D) {
        let model = build_model(
            BuiltinFamily::LqMeanField {
                mean_coupling: q,
                terminal_curvature: h,
                terminal_mean_coupling: qt,
            },
            (0.0, 0.2),
            &[1.0],
            AssumptionConstants::default(),
        )
        .unwrap();
        let grid = Grid1D::new(-8.0, 8.0, 161).unwrap();
        let mesh = TimeMesh::new(0.0, 0.2, 40).unwrap();
        let m0 = GridDensity::gaussian(grid, 0.3, 0.6).unwrap();
        (model, m0, mesh, grid)
    }

    #[test]
    fn zero_costs_give_zero_value_and_cost() {
        let (model, m0, mesh, grid) = setup(0.0, 0.0, 0.0);
        let out = solve_mftc(&model, &m0, &mesh, &grid, &FixedPointConfig::default()).unwrap();
        let rec = value_from_solution(&model, &out.solution, &out.flow).unwrap();
        assert_eq!(rec.phi, 0.0);
        assert_eq!(rec.phi, rec.running_total + rec.terminal);
        let mc = MCParams {
            n_particles: 200,
            seed: 1,
            substeps: 1,
            record_every: 1,
        };
        let j = mc_cost(&model, &out.solution.policy, &m0, &mc).unwrap();
        assert_eq!(j.value, 0.0);
    }

    #[test]
    fn affine_mean_field_terms_give_zero_vbar() {
        let (model, m0, mesh, grid) = setup(0.0, 0.0, 1.0);
        let out = solve_mftc(&model, &m0, &mesh, &grid, &FixedPointConfig::default()).unwrap();
        let d = solve_vbar(
            &model,
            &out.solution,
            &out.flow,
            &default_grid_z(),
            BoundaryPolicy::default(),
        )
        .unwrap();
        assert!(d.vbar.iter().flatten().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn point_mass_integrates_to_one() {
        let (model, m0, mesh, grid) = setup(1.0, 0.5, 1.0);
        let out = solve_mftc(&model, &m0, &mesh, &grid, &FixedPointConfig::default()).unwrap();
        let lin = Linearization::new(&model, &out.solution, &out.flow, BoundaryPolicy::default())
            .unwrap();
        let y = lin.point_mass(0.37).unwrap();
        let mass: f64 = y.iter().zip(&lin.weights).map(|(a, b)| a * b).sum();
        let first: f64 = y
            .iter()
            .zip(&lin.weights)
            .zip(grid.nodes())
            .map(|((a, b), x)| a * b * x)
            .sum();
        assert!((mass - 1.0).abs() < 1e-14);
        assert!((first - 0.37).abs() < 1e-14);
    }
}

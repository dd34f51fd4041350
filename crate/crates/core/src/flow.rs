//! Measure flows induced by a gradient field `DV`: forward Fokker–Planck on
//! the grid, Euler–Maruyama particles, and Girsanov reweighting of driftless
//! base paths. Also the dual (backward) evaluation of `∫φ dm_s`.

use std::fmt;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::VectorField;
use crate::grid::TimeMesh;
use crate::measure::{GridDensity, InverseCdf, MeasureFlow, MeasureSlice, ParticleEnsemble};
use crate::model::ModelSpec;
use crate::oracle::Estimate;
use crate::pde::{self, BoundaryPolicy, Coefficient, LinearPDECoefficients, Terminal};
use crate::rng::{self, Purpose};

/// Degeneracy threshold: ESS below this fraction of N is an error.
pub const MIN_ESS_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FlowMethod {
    #[default]
    FpGrid,
    ParticleSde,
    GirsanovReweight,
}

impl fmt::Display for FlowMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FlowMethod::FpGrid => "FP_GRID",
            FlowMethod::ParticleSde => "PARTICLE_SDE",
            FlowMethod::GirsanovReweight => "GIRSANOV_REWEIGHT",
        })
    }
}

impl std::str::FromStr for FlowMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "FP_GRID" => Ok(FlowMethod::FpGrid),
            "PARTICLE_SDE" => Ok(FlowMethod::ParticleSde),
            "GIRSANOV_REWEIGHT" => Ok(FlowMethod::GirsanovReweight),
            other => Err(Error::InvalidInput(format!("unknown flow method {other}"))),
        }
    }
}

/// Monte-Carlo settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MCParams {
    pub n_particles: usize,
    pub seed: u64,
    /// Euler substeps per mesh step.
    pub substeps: usize,
    /// Particle slices are kept at every `record_every`-th mesh node (and the
    /// last one).
    pub record_every: usize,
}

impl Default for MCParams {
    fn default() -> Self {
        Self {
            n_particles: 10_000,
            seed: 0,
            substeps: 1,
            record_every: 1,
        }
    }
}

impl MCParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 || self.substeps == 0 || self.record_every == 0 {
            return Err(Error::InvalidInput(
                "n_particles, substeps and record_every must be positive".into(),
            ));
        }
        Ok(())
    }

    fn recorded_nodes(&self, mesh: &TimeMesh) -> Vec<usize> {
        let mut nodes: Vec<usize> = (0..=mesh.n_steps()).step_by(self.record_every).collect();
        if *nodes.last().unwrap() != mesh.n_steps() {
            nodes.push(mesh.n_steps());
        }
        nodes
    }
}

/// Flow of `dX = D_pH(s, X, DV(s, X)) ds + σ dw` from `m0`.
pub fn flow_from_gradient(
    model: &ModelSpec,
    dv: &VectorField,
    m0: &MeasureSlice,
    method: FlowMethod,
    mc: &MCParams,
    bc: BoundaryPolicy,
) -> Result<MeasureFlow> {
    match method {
        FlowMethod::FpGrid => {
            let m0 = m0.as_grid().ok_or_else(|| {
                Error::InvalidInput("FP_GRID needs a grid density as initial measure".into())
            })?;
            let drift = drift_field(model, dv)?;
            pde::solve_forward_fp(&drift, model.sigma(), dv.mesh(), dv.grid(), m0, bc)
        }
        FlowMethod::ParticleSde => particle_flow(model, dv, m0, mc),
        FlowMethod::GirsanovReweight => {
            let batch = girsanov_batch(model, dv, m0, mc)?;
            batch.into_flow(mc.seed)
        }
    }
}

/// `D_pH(s, x, DV(s, x))` at every node.
pub fn drift_field(model: &ModelSpec, dv: &VectorField) -> Result<VectorField> {
    let l = model.local();
    let grid = *dv.grid();
    let mesh = *dv.mesh();
    let values = (0..mesh.n_nodes())
        .map(|n| {
            let s = mesh.time(n);
            dv.slice(n)
                .iter()
                .enumerate()
                .map(|(i, &p)| l.hamiltonian_dp(s, grid.node(i), p))
                .collect()
        })
        .collect();
    VectorField::new(mesh, grid, values)
}

/// Initial particles: the ensemble itself, or `N` inverse-CDF draws from a
/// grid density.
fn initial_particles(m0: &MeasureSlice, mc: &MCParams) -> (Vec<f64>, Vec<f64>) {
    match m0 {
        MeasureSlice::Particles(p) => (p.positions().to_vec(), p.weights().to_vec()),
        MeasureSlice::Grid(g) => {
            let inv = InverseCdf::new(g);
            let x: Vec<f64> = (0..mc.n_particles)
                .into_par_iter()
                .map(|i| {
                    let mut r = rng::stream(mc.seed, Purpose::InitialSample, i as u64);
                    inv.sample(rng::uniform(&mut r))
                })
                .collect();
            let n = x.len();
            (x, vec![1.0 / n as f64; n])
        }
    }
}

/// `DV(s, x)`, linear in time between mesh nodes and in space.
fn gradient_at(dv: &VectorField, n: usize, frac: f64, x: f64) -> f64 {
    let g = dv.grid();
    let p0 = g.interpolate(dv.slice(n), x);
    if frac == 0.0 || n == dv.mesh().n_steps() {
        return p0;
    }
    p0 + frac * (g.interpolate(dv.slice(n + 1), x) - p0)
}

fn particle_flow(
    model: &ModelSpec,
    dv: &VectorField,
    m0: &MeasureSlice,
    mc: &MCParams,
) -> Result<MeasureFlow> {
    mc.validate()?;
    let mesh = *dv.mesh();
    let (x0, w0) = initial_particles(m0, mc);
    let nodes = mc.recorded_nodes(&mesh);
    let l = model.local();
    let sigma = model.sigma();
    let k = mc.substeps;
    let h = mesh.dt() / k as f64;
    let sqh = h.sqrt();
    // paths[i][j] = position of particle i at nodes[j]
    let paths: Vec<Vec<f64>> = x0
        .par_iter()
        .enumerate()
        .map(|(i, &x_init)| {
            let mut r = rng::stream(mc.seed, Purpose::ParticleSde, i as u64);
            let mut out = Vec::with_capacity(nodes.len());
            let mut x = x_init;
            let mut next = 0;
            for n in 0..=mesh.n_steps() {
                if nodes[next] == n {
                    out.push(x);
                    next += 1;
                    if next == nodes.len() {
                        break;
                    }
                }
                for j in 0..k {
                    let frac = j as f64 / k as f64;
                    let s = mesh.time(n) + j as f64 * h;
                    let p = gradient_at(dv, n, frac, x);
                    x += l.hamiltonian_dp(s, x, p) * h + sigma * sqh * rng::normal(&mut r);
                }
            }
            out
        })
        .collect();
    let mut slices = Vec::with_capacity(nodes.len());
    for j in 0..nodes.len() {
        let pos: Vec<f64> = paths.iter().map(|p| p[j]).collect();
        if let Some(i) = pos.iter().position(|x| !x.is_finite()) {
            return Err(Error::NotFinite {
                s: mesh.time(nodes[j]),
                x: x0[i],
            });
        }
        slices.push(MeasureSlice::Particles(ParticleEnsemble::new(
            pos,
            w0.clone(),
            mc.seed,
        )?));
    }
    MeasureFlow::new(mesh, nodes, slices)
}

/// Driftless base paths `X_s = x + σ(w_s − w_t)` with log-weights
/// `log M_s = Σ g·Δw − ½g²Δτ`, `g = σ⁻¹ D_pH(τ, X_τ, DV(τ, X_τ))`.
#[derive(Debug, Clone, PartialEq)]
pub struct GirsanovBatch {
    pub mesh: TimeMesh,
    /// Mesh nodes at which paths and weights are stored.
    pub nodes: Vec<usize>,
    /// `positions[j][i]`: particle `i` at `nodes[j]`.
    pub positions: Vec<Vec<f64>>,
    /// `log_weights[j][i] = log M` at `nodes[j]`.
    pub log_weights: Vec<Vec<f64>>,
    /// Initial weights of the particles (sum to one).
    pub initial_weights: Vec<f64>,
    /// Effective sample size of the normalized weights per stored node.
    pub ess: Vec<f64>,
}

pub fn girsanov_batch(
    model: &ModelSpec,
    dv: &VectorField,
    m0: &MeasureSlice,
    mc: &MCParams,
) -> Result<GirsanovBatch> {
    mc.validate()?;
    let mesh = *dv.mesh();
    let (x0, w0) = initial_particles(m0, mc);
    let nodes = mc.recorded_nodes(&mesh);
    let l = model.local();
    let sigma = model.sigma();
    let k = mc.substeps;
    let h = mesh.dt() / k as f64;
    let sqh = h.sqrt();
    let per_particle: Vec<(Vec<f64>, Vec<f64>)> = x0
        .par_iter()
        .enumerate()
        .map(|(i, &x_init)| {
            let mut r = rng::stream(mc.seed, Purpose::Girsanov, i as u64);
            let mut pos = Vec::with_capacity(nodes.len());
            let mut lw = Vec::with_capacity(nodes.len());
            let (mut x, mut log_m) = (x_init, 0.0);
            let mut next = 0;
            for n in 0..=mesh.n_steps() {
                if nodes[next] == n {
                    pos.push(x);
                    lw.push(log_m);
                    next += 1;
                    if next == nodes.len() {
                        break;
                    }
                }
                for j in 0..k {
                    let frac = j as f64 / k as f64;
                    let s = mesh.time(n) + j as f64 * h;
                    let p = gradient_at(dv, n, frac, x);
                    let g = l.hamiltonian_dp(s, x, p) / sigma;
                    let dw = sqh * rng::normal(&mut r);
                    log_m += g * dw - 0.5 * g * g * h;
                    x += sigma * dw;
                }
            }
            (pos, lw)
        })
        .collect();
    let mut positions = vec![Vec::with_capacity(x0.len()); nodes.len()];
    let mut log_weights = vec![Vec::with_capacity(x0.len()); nodes.len()];
    for (pos, lw) in per_particle {
        for j in 0..nodes.len() {
            positions[j].push(pos[j]);
            log_weights[j].push(lw[j]);
        }
    }
    let ess = log_weights.iter().map(|lw| ess_of(lw, &w0)).collect();
    Ok(GirsanovBatch {
        mesh,
        nodes,
        positions,
        log_weights,
        initial_weights: w0,
        ess,
    })
}

/// Normalized weights `w0·M / Σ w0·M`, computed with a max shift.
fn normalized_weights(log_m: &[f64], w0: &[f64]) -> Vec<f64> {
    let top = log_m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = log_m
        .iter()
        .zip(w0)
        .map(|(l, w)| w * (l - top).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

fn ess_of(log_m: &[f64], w0: &[f64]) -> f64 {
    let w = normalized_weights(log_m, w0);
    1.0 / w.iter().map(|v| v * v).sum::<f64>()
}

impl GirsanovBatch {
    pub fn len(&self) -> usize {
        self.initial_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.initial_weights.is_empty()
    }

    /// Weighted ensembles at the stored nodes; WeightDegenerate when the ESS
    /// drops below 1% of N.
    pub fn into_flow(self, seed: u64) -> Result<MeasureFlow> {
        let n = self.len() as f64;
        for (j, &e) in self.ess.iter().enumerate() {
            if e < MIN_ESS_FRACTION * n {
                return Err(Error::WeightDegenerate {
                    node: self.nodes[j],
                    ess: e,
                    threshold: MIN_ESS_FRACTION * n,
                });
            }
        }
        let slices = self
            .positions
            .into_iter()
            .zip(&self.log_weights)
            .map(|(pos, lw)| {
                let w = normalized_weights(lw, &self.initial_weights);
                ParticleEnsemble::new(pos, w, seed).map(MeasureSlice::Particles)
            })
            .collect::<Result<Vec<_>>>()?;
        MeasureFlow::new(self.mesh, self.nodes, slices)
    }
}

/// Per-node sample statistics of the Girsanov density `M`.
#[derive(Debug, Clone, PartialEq)]
pub struct GirsanovDiagnostics {
    pub nodes: Vec<usize>,
    pub mean_m: Vec<f64>,
    pub stderr_m: Vec<f64>,
    /// Sample mean of `M·|X|²` and its standard error.
    pub mean_m_x2: Vec<f64>,
    pub stderr_m_x2: Vec<f64>,
    pub ess: Vec<f64>,
    /// `|mean(M) − 1| > 3 s.e.` at some node.
    pub flagged: bool,
}

pub fn girsanov_diagnostics(batch: &GirsanovBatch) -> GirsanovDiagnostics {
    let w0 = &batch.initial_weights;
    let n_eff = 1.0 / w0.iter().map(|w| w * w).sum::<f64>();
    let mut out = GirsanovDiagnostics {
        nodes: batch.nodes.clone(),
        mean_m: Vec::new(),
        stderr_m: Vec::new(),
        mean_m_x2: Vec::new(),
        stderr_m_x2: Vec::new(),
        ess: batch.ess.clone(),
        flagged: false,
    };
    for (lw, pos) in batch.log_weights.iter().zip(&batch.positions) {
        let m: Vec<f64> = lw.iter().map(|l| l.exp()).collect();
        // Centered at 1 so that M ≡ 1 gives exactly 1.
        let mean = 1.0 + m.iter().zip(w0).map(|(v, w)| w * (v - 1.0)).sum::<f64>();
        let var: f64 = m
            .iter()
            .zip(w0)
            .map(|(v, w)| w * (v - mean) * (v - mean))
            .sum::<f64>()
            * n_eff
            / (n_eff - 1.0).max(1.0);
        let se = (var / n_eff).sqrt();
        let mx2: f64 = m
            .iter()
            .zip(pos)
            .zip(w0)
            .map(|((v, x), w)| w * v * x * x)
            .sum();
        let var_x2: f64 = m
            .iter()
            .zip(pos)
            .zip(w0)
            .map(|((v, x), w)| w * (v * x * x - mx2).powi(2))
            .sum::<f64>()
            * n_eff
            / (n_eff - 1.0).max(1.0);
        if (mean - 1.0).abs() > 3.0 * se {
            out.flagged = true;
        }
        out.mean_m.push(mean);
        out.stderr_m.push(se);
        out.mean_m_x2.push(mx2);
        out.stderr_m_x2.push((var_x2 / n_eff).sqrt());
    }
    out
}

/// `∫ x^order dm` with a standard error: zero for grid densities, the
/// self-normalized importance-sampling error `(Σ wᵢ²(xᵢ^k − mean)²)^½` for
/// weighted ensembles.
pub fn moment_estimate(slice: &MeasureSlice, order: i32) -> Estimate {
    match slice {
        MeasureSlice::Grid(g) => Estimate {
            value: crate::measure::moments(g, order as u32),
            stderr: 0.0,
        },
        MeasureSlice::Particles(p) => {
            let mean: f64 = p
                .positions()
                .iter()
                .zip(p.weights())
                .map(|(x, w)| w * x.powi(order))
                .sum();
            let var: f64 = p
                .positions()
                .iter()
                .zip(p.weights())
                .map(|(x, w)| w * w * (x.powi(order) - mean).powi(2))
                .sum();
            Estimate {
                value: mean,
                stderr: var.sqrt(),
            }
        }
    }
}

/// `∫ Ψ(t, z) dm₀(z)` where `Ψ` solves the backward equation
/// `−∂Ψ/∂τ − (a/2)Ψ'' = D_pH(τ, z, DV)·Ψ'` on `[t, s]`, `Ψ(s) = φ`.
pub fn dual_expectation(
    model: &ModelSpec,
    dv: &VectorField,
    phi: impl Fn(f64) -> f64 + Send + Sync + 'static,
    m0: &GridDensity,
    s_index: usize,
    bc: BoundaryPolicy,
) -> Result<f64> {
    if m0.grid() != dv.grid() {
        return Err(Error::MeshMismatch("m0 must live on the grid of DV".into()));
    }
    if s_index == 0 {
        return Ok(crate::measure::Measure::integrate(m0, &phi));
    }
    let mesh = dv.mesh().head(s_index)?;
    let drift = drift_field(model, dv)?;
    let coeffs = LinearPDECoefficients::new(
        Coefficient::Nodal(drift.values()[..=s_index].to_vec()),
        Coefficient::Zero,
        Terminal::callable(phi),
    );
    let psi = pde::solve_backward_linear(&coeffs, model.sigma(), &mesh, dv.grid(), bc)?;
    let prod: Vec<f64> = psi
        .slice(0)
        .iter()
        .zip(m0.values())
        .map(|(a, b)| a * b)
        .collect();
    Ok(dv.grid().integrate(&prod))
}

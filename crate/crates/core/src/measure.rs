//! Probability measures on the truncated line: grid densities, weighted
//! particle ensembles, measure flows, moments, pushforward and 1-D W₂.

use crate::error::{Error, Result};
use crate::field::VectorField;
use crate::grid::{Grid1D, TimeMesh};
use crate::model::MeanFieldTerm;

/// Number of quantile levels used by [`wasserstein2_1d`].
pub const W2_QUANTILES: usize = 512;

/// Boundary density above which a grid density is considered to leak mass.
pub const LEAK_WARNING: f64 = 1e-8;

pub trait Measure: Send + Sync {
    /// `∫ f dm`.
    fn integrate(&self, f: &dyn Fn(f64) -> f64) -> f64;

    /// Generalized inverse CDF at the given levels in (0, 1).
    fn quantiles(&self, levels: &[f64]) -> Vec<f64>;

    fn mean(&self) -> f64 {
        self.integrate(&|x| x)
    }
}

/// Nodal density values, integrating to one under the trapezoid rule.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    grid: Grid1D,
    values: Vec<f64>,
}

impl GridDensity {
    /// Validates non-negativity and finiteness, then normalizes.
    pub fn from_values(grid: Grid1D, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::MeshMismatch(format!(
                "{} density values for {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput(format!(
                "density value {} at x={} is negative or non-finite",
                values[i],
                grid.node(i)
            )));
        }
        let mass = grid.integrate(&values);
        if !(mass > 0.0) {
            return Err(Error::InvalidInput("density has zero mass".into()));
        }
        let values = values.into_iter().map(|v| v / mass).collect();
        Ok(Self { grid, values })
    }

    /// Gaussian `N(mean, std²)` restricted to the grid and renormalized.
    pub fn gaussian(grid: Grid1D, mean: f64, std: f64) -> Result<Self> {
        if !(std > 0.0) {
            return Err(Error::InvalidInput(format!("std {std} must be positive")));
        }
        let values = grid
            .nodes()
            .iter()
            .map(|x| (-0.5 * ((x - mean) / std).powi(2)).exp())
            .collect();
        Self::from_values(grid, values)
    }

    /// Takes values as-is (mass already exact, e.g. from a conservative step).
    pub(crate) fn from_raw(grid: Grid1D, values: Vec<f64>) -> Self {
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mass(&self) -> f64 {
        self.grid.integrate(&self.values)
    }

    /// Density at `x` by linear interpolation, zero outside the grid.
    pub fn density_at(&self, x: f64) -> f64 {
        if x < self.grid.x_min() || x > self.grid.x_max() {
            0.0
        } else {
            self.grid.interpolate(&self.values, x).max(0.0)
        }
    }

    /// Largest density at the two boundary nodes.
    pub fn boundary_density(&self) -> f64 {
        self.values[0].max(self.values[self.values.len() - 1])
    }

    pub fn is_leaking(&self) -> bool {
        self.boundary_density() > LEAK_WARNING
    }

    /// Density of `T#m` for an increasing map `T`, evaluated on the same grid
    /// via the change-of-variables formula with four-point interpolation of
    /// `m`; renormalized to absorb the truncation.
    pub fn pushforward_monotone(&self, map: impl Fn(f64) -> f64) -> Result<Self> {
        let (lo, hi) = (self.grid.x_min(), self.grid.x_max());
        let span = hi - lo;
        let h = 1e-5 * span;
        let mut out = Vec::with_capacity(self.grid.len());
        for y in self.grid.nodes() {
            // Bisection for x with T(x) = y on a widened bracket.
            let (mut a, mut b) = (lo - span, hi + span);
            if !(map(a) <= y && map(b) >= y) {
                out.push(0.0);
                continue;
            }
            for _ in 0..200 {
                let mid = 0.5 * (a + b);
                if map(mid) < y {
                    a = mid;
                } else {
                    b = mid;
                }
                if b - a < 1e-14 * span {
                    break;
                }
            }
            let x = 0.5 * (a + b);
            let jac = (map(x + h) - map(x - h)) / (2.0 * h);
            if !(jac > 0.0) || !jac.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "map is not increasing near x={x}"
                )));
            }
            out.push((self.cubic_density(x) / jac).max(0.0));
        }
        Self::from_values(self.grid, out)
    }

    fn cubic_density(&self, x: f64) -> f64 {
        let n = self.grid.len();
        if x < self.grid.x_min() || x > self.grid.x_max() {
            return 0.0;
        }
        let t = (x - self.grid.x_min()) / self.grid.dx();
        let i = (t.floor() as usize).clamp(1, n - 3);
        let u = t - i as f64;
        let p = |k: isize| self.values[(i as isize + k) as usize];
        // Lagrange weights on nodes i-1, i, i+1, i+2.
        let w0 = -u * (u - 1.0) * (u - 2.0) / 6.0;
        let w1 = (u + 1.0) * (u - 1.0) * (u - 2.0) / 2.0;
        let w2 = -(u + 1.0) * u * (u - 2.0) / 2.0;
        let w3 = (u + 1.0) * u * (u - 1.0) / 6.0;
        w0 * p(-1) + w1 * p(0) + w2 * p(1) + w3 * p(2)
    }
}

impl Measure for GridDensity {
    fn integrate(&self, f: &dyn Fn(f64) -> f64) -> f64 {
        let g = &self.grid;
        let n = g.len();
        let mut acc = 0.0;
        for i in 0..n {
            acc += g.weight(i) * self.values[i] * f(g.node(i));
        }
        acc
    }

    /// Inverts the exact CDF of the piecewise-linear density.
    fn quantiles(&self, levels: &[f64]) -> Vec<f64> {
        let g = &self.grid;
        let n = g.len();
        let dx = g.dx();
        let mut cdf = vec![0.0; n];
        for i in 1..n {
            cdf[i] = cdf[i - 1] + 0.5 * dx * (self.values[i - 1] + self.values[i]);
        }
        let total = cdf[n - 1];
        let mut i = 0;
        let mut out = Vec::with_capacity(levels.len());
        let mut sorted: Vec<(usize, f64)> = levels.iter().copied().enumerate().collect();
        sorted.sort_by(|a, b| a.1.total_cmp(&b.1));
        let mut res = vec![0.0; levels.len()];
        for (k, u) in sorted {
            let target = u * total;
            while i + 1 < n - 1 && cdf[i + 1] < target {
                i += 1;
            }
            let m0 = self.values[i];
            let m1 = self.values[i + 1];
            let a = 0.5 * dx * (m1 - m0);
            let b = dx * m0;
            let r = (target - cdf[i]).max(0.0);
            let disc = (b * b + 4.0 * a * r).max(0.0);
            let denom = b + disc.sqrt();
            let theta = if denom > 0.0 {
                (2.0 * r / denom).min(1.0)
            } else {
                0.0
            };
            res[k] = g.node(i) + theta * dx;
        }
        out.extend(res);
        out
    }
}

/// Inverse-CDF sampling from a grid density; inverts the exact
/// piecewise-quadratic CDF of the piecewise-linear density.
#[derive(Debug, Clone)]
pub struct InverseCdf {
    grid: Grid1D,
    density: Vec<f64>,
    cdf: Vec<f64>,
}

impl InverseCdf {
    pub fn new(m: &GridDensity) -> Self {
        let g = *m.grid();
        let v = m.values();
        let mut cdf = vec![0.0; g.len()];
        for i in 1..g.len() {
            cdf[i] = cdf[i - 1] + 0.5 * g.dx() * (v[i - 1] + v[i]);
        }
        let total = cdf[g.len() - 1];
        for c in &mut cdf {
            *c /= total;
        }
        let density = v.iter().map(|d| d / total).collect();
        Self {
            grid: g,
            density,
            cdf,
        }
    }

    pub fn sample(&self, u: f64) -> f64 {
        let k = self
            .cdf
            .partition_point(|&c| c < u)
            .clamp(1, self.cdf.len() - 1);
        let h = self.grid.dx();
        let (v0, v1) = (self.density[k - 1], self.density[k]);
        // Solve h(v0 t + (v1 − v0) t²/2) = u − F(x_{k−1}) for t in [0, 1].
        let target = ((u - self.cdf[k - 1]) / h).max(0.0);
        let a = 0.5 * (v1 - v0);
        let t = if a.abs() < 1e-14 * (v0 + v1).max(1e-300) {
            if v0 > 0.0 {
                target / v0
            } else {
                0.5
            }
        } else {
            let disc = (v0 * v0 + 4.0 * a * target).max(0.0);
            2.0 * target / (v0 + disc.sqrt()).max(1e-300)
        };
        self.grid.node(k - 1) + t.clamp(0.0, 1.0) * h
    }
}

/// Weighted particles; weights sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    positions: Vec<f64>,
    weights: Vec<f64>,
    rng_seed: u64,
}

impl ParticleEnsemble {
    /// Validates and normalizes the weights.
    pub fn new(positions: Vec<f64>, weights: Vec<f64>, rng_seed: u64) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::InvalidInput(
                "ensemble needs at least one particle".into(),
            ));
        }
        if positions.len() != weights.len() {
            return Err(Error::InvalidInput(format!(
                "{} positions but {} weights",
                positions.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidInput(
                "weights must be finite and non-negative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InvalidInput("weights sum to zero".into()));
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(Self {
            positions,
            weights,
            rng_seed,
        })
    }

    pub fn uniform(positions: Vec<f64>, rng_seed: u64) -> Result<Self> {
        let n = positions.len();
        Self::new(positions, vec![1.0; n], rng_seed)
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// `1 / Σ wᵢ²`.
    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }
}

impl Measure for ParticleEnsemble {
    fn integrate(&self, f: &dyn Fn(f64) -> f64) -> f64 {
        self.positions
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }

    fn quantiles(&self, levels: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..self.positions.len()).collect();
        idx.sort_by(|&a, &b| {
            self.positions[a]
                .total_cmp(&self.positions[b])
                .then(a.cmp(&b))
        });
        let mut cum = Vec::with_capacity(idx.len());
        let mut acc = 0.0;
        for &i in &idx {
            acc += self.weights[i];
            cum.push(acc);
        }
        levels
            .iter()
            .map(|&u| {
                let target = u * acc;
                let k = cum.partition_point(|&c| c < target).min(idx.len() - 1);
                self.positions[idx[k]]
            })
            .collect()
    }
}

/// One slice of a flow.
#[derive(Debug, Clone, PartialEq)]
pub enum MeasureSlice {
    Grid(GridDensity),
    Particles(ParticleEnsemble),
}

impl MeasureSlice {
    pub fn as_measure(&self) -> &dyn Measure {
        match self {
            MeasureSlice::Grid(g) => g,
            MeasureSlice::Particles(p) => p,
        }
    }

    pub fn as_grid(&self) -> Option<&GridDensity> {
        match self {
            MeasureSlice::Grid(g) => Some(g),
            MeasureSlice::Particles(_) => None,
        }
    }

    pub fn as_particles(&self) -> Option<&ParticleEnsemble> {
        match self {
            MeasureSlice::Particles(p) => Some(p),
            MeasureSlice::Grid(_) => None,
        }
    }
}

impl Measure for MeasureSlice {
    fn integrate(&self, f: &dyn Fn(f64) -> f64) -> f64 {
        self.as_measure().integrate(f)
    }

    fn quantiles(&self, levels: &[f64]) -> Vec<f64> {
        self.as_measure().quantiles(levels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Representation {
    Grid,
    Particles,
}

/// Measures at (a subset of) the nodes of a time mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureFlow {
    mesh: TimeMesh,
    nodes: Vec<usize>,
    slices: Vec<MeasureSlice>,
    leak: f64,
}

impl MeasureFlow {
    /// `nodes[k]` is the mesh node of `slices[k]`; nodes must be increasing.
    pub fn new(mesh: TimeMesh, nodes: Vec<usize>, slices: Vec<MeasureSlice>) -> Result<Self> {
        if nodes.len() != slices.len() || nodes.is_empty() {
            return Err(Error::MeshMismatch(format!(
                "{} nodes for {} slices",
                nodes.len(),
                slices.len()
            )));
        }
        if nodes.windows(2).any(|w| w[0] >= w[1]) || *nodes.last().unwrap() > mesh.n_steps() {
            return Err(Error::MeshMismatch(
                "flow nodes must increase within the mesh".into(),
            ));
        }
        let grid = matches!(slices[0], MeasureSlice::Grid(_));
        if slices
            .iter()
            .any(|s| matches!(s, MeasureSlice::Grid(_)) != grid)
        {
            return Err(Error::InvalidInput("flow mixes representations".into()));
        }
        Ok(Self {
            mesh,
            nodes,
            slices,
            leak: 0.0,
        })
    }

    /// A flow with a slice at every mesh node.
    pub fn complete(mesh: TimeMesh, slices: Vec<MeasureSlice>) -> Result<Self> {
        let nodes = (0..slices.len()).collect();
        let flow = Self::new(mesh, nodes, slices)?;
        if !flow.is_complete() {
            return Err(Error::MeshMismatch(format!(
                "{} slices for {} mesh nodes",
                flow.slices.len(),
                mesh.n_nodes()
            )));
        }
        Ok(flow)
    }

    /// Constant-in-time flow (every node holds `m`).
    pub fn frozen(mesh: TimeMesh, m: MeasureSlice) -> Self {
        let n = mesh.n_nodes();
        Self {
            mesh,
            nodes: (0..n).collect(),
            slices: vec![m; n],
            leak: 0.0,
        }
    }

    pub(crate) fn with_leak(mut self, leak: f64) -> Self {
        self.leak = leak;
        self
    }

    pub fn mesh(&self) -> &TimeMesh {
        &self.mesh
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn slices(&self) -> &[MeasureSlice] {
        &self.slices
    }

    /// Cumulative boundary-cell mass recorded by the producing scheme.
    pub fn leak(&self) -> f64 {
        self.leak
    }

    pub fn representation(&self) -> Representation {
        match self.slices[0] {
            MeasureSlice::Grid(_) => Representation::Grid,
            MeasureSlice::Particles(_) => Representation::Particles,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.nodes.len() == self.mesh.n_nodes()
    }

    /// Slice recorded at mesh node `n`, if any.
    pub fn at_node(&self, n: usize) -> Option<&MeasureSlice> {
        self.nodes.binary_search(&n).ok().map(|k| &self.slices[k])
    }

    pub fn first(&self) -> &MeasureSlice {
        &self.slices[0]
    }

    pub fn last(&self) -> &MeasureSlice {
        self.slices.last().unwrap()
    }

    /// Slice at node `n`, requiring a complete flow.
    pub fn slice(&self, n: usize) -> &MeasureSlice {
        debug_assert!(self.is_complete());
        &self.slices[n]
    }

    /// Largest W₂ distance between slices recorded at common nodes.
    pub fn max_w2(&self, other: &MeasureFlow) -> f64 {
        self.nodes
            .iter()
            .zip(&self.slices)
            .filter_map(|(&n, s)| {
                other
                    .at_node(n)
                    .map(|o| wasserstein2_1d(s.as_measure(), o.as_measure()))
            })
            .fold(0.0, f64::max)
    }
}

/// `∫ x^order dm`.
pub fn moments(mu: &dyn Measure, order: u32) -> f64 {
    mu.integrate(&|x| x.powi(order as i32))
}

/// Moves every particle through `map`, keeping the weights.
pub fn pushforward(mu: &ParticleEnsemble, map: impl Fn(f64) -> f64) -> Result<ParticleEnsemble> {
    let positions: Vec<f64> = mu.positions.iter().map(|&x| map(x)).collect();
    if let Some(index) = positions.iter().position(|y| !y.is_finite()) {
        return Err(Error::NonFiniteMap {
            index,
            x: mu.positions[index],
        });
    }
    Ok(ParticleEnsemble {
        positions,
        weights: mu.weights.clone(),
        rng_seed: mu.rng_seed,
    })
}

/// One-dimensional W₂ from the quantile functions at the midpoints of
/// `W2_QUANTILES` equal probability cells.
pub fn wasserstein2_1d(mu: &dyn Measure, nu: &dyn Measure) -> f64 {
    let k = W2_QUANTILES;
    let levels: Vec<f64> = (0..k).map(|i| (i as f64 + 0.5) / k as f64).collect();
    let a = mu.quantiles(&levels);
    let b = nu.quantiles(&levels);
    let s: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
    (s / k as f64).sqrt()
}

/// Largest gap, over interior mesh nodes, between the centered difference of
/// `s ↦ F(m_s)` and `∫ [D dF/dν(m_s)·v + (a/2) D² dF/dν(m_s)] dm_s`, where
/// `v` is the drift field that generated the flow and `a = σ²`.
pub fn chain_rule_check(
    functional: &dyn MeanFieldTerm,
    flow: &MeasureFlow,
    drift: &VectorField,
    sigma: f64,
) -> Result<f64> {
    if !flow.is_complete() || drift.mesh() != flow.mesh() {
        return Err(Error::MeshMismatch(
            "drift field and flow must share a complete mesh".into(),
        ));
    }
    let mesh = flow.mesh();
    let a = sigma * sigma;
    let grid = *drift.grid();
    let values: Vec<f64> = flow
        .slices()
        .iter()
        .map(|m| functional.value(m.as_measure()))
        .collect();
    let mut worst: f64 = 0.0;
    for n in 1..mesh.n_steps() {
        let lhs = (values[n + 1] - values[n - 1]) / (2.0 * mesh.dt());
        let m = flow.slice(n).as_measure();
        let fv = functional.first_variation(m);
        let v = drift.slice(n);
        let rhs = m.integrate(&|x| {
            let [_, d, dd] = fv.eval(x);
            d * grid.interpolate(v, x) + 0.5 * a * dd
        });
        worst = worst.max((lhs - rhs).abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_moments_on_the_default_grid() {
        let g = Grid1D::new(-8.0, 8.0, 801).unwrap();
        let m = GridDensity::gaussian(g, 0.0, 1.0).unwrap();
        assert!((m.mass() - 1.0).abs() < 1e-12);
        assert!((moments(&m, 2) - 1.0).abs() < 1e-4);
        assert!(moments(&m, 1).abs() < 1e-14);
    }

    #[test]
    fn inverse_cdf_matches_quantiles() {
        let g = Grid1D::new(-8.0, 8.0, 401).unwrap();
        let m = GridDensity::gaussian(g, 0.5, 1.0).unwrap();
        let c = InverseCdf::new(&m);
        let levels = [0.01, 0.3, 0.5, 0.77, 0.999];
        for (u, q) in levels.iter().zip(m.quantiles(&levels)) {
            assert!((c.sample(*u) - q).abs() < 1e-9, "{u}");
        }
    }

    #[test]
    fn particle_moments() {
        let delta = ParticleEnsemble::uniform(vec![0.0], 0).unwrap();
        assert_eq!(moments(&delta, 2), 0.0);
        let pm = ParticleEnsemble::uniform(vec![-1.0, 1.0], 0).unwrap();
        assert_eq!(moments(&pm, 1), 0.0);
        let doubled = pushforward(&pm, |x| 2.0 * x).unwrap();
        assert_eq!(moments(&doubled, 2), 4.0);
    }

    #[test]
    fn w2_of_point_masses_and_shifted_gaussians() {
        let a = ParticleEnsemble::uniform(vec![0.0], 0).unwrap();
        let b = ParticleEnsemble::uniform(vec![1.5], 0).unwrap();
        assert!((wasserstein2_1d(&a, &b) - 1.5).abs() < 1e-15);
        let g = Grid1D::new(-8.0, 8.0, 401).unwrap();
        let n0 = GridDensity::gaussian(g, 0.0, 1.0).unwrap();
        let n1 = GridDensity::gaussian(g, 0.5, 1.0).unwrap();
        assert!((wasserstein2_1d(&n0, &n1) - 0.5).abs() < 1e-3);
        assert_eq!(wasserstein2_1d(&n0, &n0), 0.0);
    }

    #[test]
    fn non_finite_map_is_rejected() {
        let pm = ParticleEnsemble::uniform(vec![-1.0, 0.0], 0).unwrap();
        assert!(matches!(
            pushforward(&pm, |x| 1.0 / x),
            Err(Error::NonFiniteMap { index: 1, .. })
        ));
    }

    #[test]
    fn monotone_pushforward_shifts_the_mean() {
        let g = Grid1D::new(-8.0, 8.0, 401).unwrap();
        let m = GridDensity::gaussian(g, 0.3, 0.7).unwrap();
        let shifted = m.pushforward_monotone(|x| x + 0.05).unwrap();
        assert!((shifted.mean() - 0.35).abs() < 1e-7);
        let scaled = m.pushforward_monotone(|x| 1.1 * x).unwrap();
        assert!((moments(&scaled, 2) - 1.21 * moments(&m, 2)).abs() < 1e-6);
    }

    #[test]
    fn flow_lookup() {
        let mesh = TimeMesh::new(0.0, 1.0, 4).unwrap();
        let s = MeasureSlice::Particles(ParticleEnsemble::uniform(vec![0.0], 0).unwrap());
        let f = MeasureFlow::new(mesh, vec![0, 2, 4], vec![s.clone(), s.clone(), s]).unwrap();
        assert!(f.at_node(2).is_some());
        assert!(f.at_node(1).is_none());
        assert!(!f.is_complete());
    }
}

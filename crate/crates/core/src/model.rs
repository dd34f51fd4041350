//! Problem data: coefficients, mean-field cost terms, built-in families and
//! the assumption constants consumed by the majorant audit.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::Grid1D;
use crate::measure::{GridDensity, Measure};
use crate::rng::{self, Purpose};

/// Pointwise coefficients in one space dimension.
///
/// `H(s,x,p) = inf_v { l(s,x,v) + p·v }` with minimizer `v̂`; implementors
/// must keep `D_pH = v̂` and `D_v l(s,x,v̂) + p = 0`.
pub trait LocalCoefficients: Send + Sync + fmt::Debug {
    fn hamiltonian(&self, s: f64, x: f64, p: f64) -> f64;
    fn hamiltonian_dp(&self, s: f64, x: f64, p: f64) -> f64;
    fn hamiltonian_dx(&self, s: f64, x: f64, p: f64) -> f64;
    /// `D²_pH`, used by the derivative-field feedback term.
    fn hamiltonian_dpp(&self, s: f64, x: f64, p: f64) -> f64;
    fn running_cost(&self, s: f64, x: f64, v: f64) -> f64;
    fn running_cost_dv(&self, s: f64, x: f64, v: f64) -> f64;
    fn running_cost_dx(&self, s: f64, x: f64, v: f64) -> f64;
    fn minimizer(&self, s: f64, x: f64, p: f64) -> f64;
    fn terminal(&self, x: f64) -> f64;
    fn terminal_dx(&self, x: f64) -> f64;
    fn terminal_dxx(&self, x: f64) -> f64;
}

/// `x ↦ [dF/dν(m)(x), D_x dF/dν(m)(x), D²_x dF/dν(m)(x)]` for a frozen `m`.
#[derive(Clone)]
pub struct FirstVariation(Arc<dyn Fn(f64) -> [f64; 3] + Send + Sync>);

impl FirstVariation {
    pub fn new(f: impl Fn(f64) -> [f64; 3] + Send + Sync + 'static) -> Self {
        Self(Arc::new(f))
    }

    pub fn eval(&self, x: f64) -> [f64; 3] {
        (self.0)(x)
    }

    pub fn value(&self, x: f64) -> f64 {
        (self.0)(x)[0]
    }

    pub fn dx(&self, x: f64) -> f64 {
        (self.0)(x)[1]
    }
}

impl fmt::Debug for FirstVariation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("FirstVariation(..)")
    }
}

/// `(x, z) ↦ [d²F/dν²(m)(x,z), D_z d²F/dν²(m)(x,z)]` for a frozen `m`.
#[derive(Clone)]
pub struct SecondVariation(Arc<dyn Fn(f64, f64) -> [f64; 2] + Send + Sync>);

impl SecondVariation {
    pub fn new(f: impl Fn(f64, f64) -> [f64; 2] + Send + Sync + 'static) -> Self {
        Self(Arc::new(f))
    }

    pub fn eval(&self, x: f64, z: f64) -> [f64; 2] {
        (self.0)(x, z)
    }

    pub fn value(&self, x: f64, z: f64) -> f64 {
        (self.0)(x, z)[0]
    }
}

impl fmt::Debug for SecondVariation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecondVariation(..)")
    }
}

/// A cost functional of the measure (`F` or `F_T`) with its linear
/// functional derivatives.
pub trait MeanFieldTerm: Send + Sync + fmt::Debug {
    fn value(&self, m: &dyn Measure) -> f64;
    fn first_variation(&self, m: &dyn Measure) -> FirstVariation;
    /// `None` when the second derivative is not available.
    fn second_variation(&self, m: &dyn Measure) -> Option<SecondVariation>;
    /// True when `d²F/dν²` vanishes identically (F affine in m).
    fn is_linear(&self) -> bool {
        false
    }
}

/// `F ≡ 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoCoupling;

impl MeanFieldTerm for NoCoupling {
    fn value(&self, _m: &dyn Measure) -> f64 {
        0.0
    }

    fn first_variation(&self, _m: &dyn Measure) -> FirstVariation {
        FirstVariation::new(|_| [0.0; 3])
    }

    fn second_variation(&self, _m: &dyn Measure) -> Option<SecondVariation> {
        Some(SecondVariation::new(|_, _| [0.0; 2]))
    }

    fn is_linear(&self) -> bool {
        true
    }
}

/// `F(m) = ½·weight·(∫ξ dm)²`, so `dF/dν(m)(x) = weight·m̄·x` and
/// `d²F/dν²(m)(x,z) = weight·x·z`.
#[derive(Debug, Clone, Copy)]
pub struct SquaredMean {
    pub weight: f64,
}

impl MeanFieldTerm for SquaredMean {
    fn value(&self, m: &dyn Measure) -> f64 {
        let mean = m.mean();
        0.5 * self.weight * mean * mean
    }

    fn first_variation(&self, m: &dyn Measure) -> FirstVariation {
        let c = self.weight * m.mean();
        FirstVariation::new(move |x| [c * x, c, 0.0])
    }

    fn second_variation(&self, _m: &dyn Measure) -> Option<SecondVariation> {
        let w = self.weight;
        Some(SecondVariation::new(move |x, z| [w * x * z, w * x]))
    }
}

/// `F(m) = ∫ p(ξ) dm(ξ)` for a polynomial `p` (coefficients by ascending degree).
#[derive(Debug, Clone)]
pub struct PolynomialMoment {
    pub coeffs: Vec<f64>,
}

impl PolynomialMoment {
    fn eval(coeffs: &[f64], x: f64) -> [f64; 3] {
        let mut v = 0.0;
        let mut d = 0.0;
        let mut dd = 0.0;
        for &c in coeffs.iter().rev() {
            dd = dd * x + 2.0 * d;
            d = d * x + v;
            v = v * x + c;
        }
        [v, d, dd]
    }
}

impl MeanFieldTerm for PolynomialMoment {
    fn value(&self, m: &dyn Measure) -> f64 {
        let c = self.coeffs.clone();
        m.integrate(&move |x| Self::eval(&c, x)[0])
    }

    fn first_variation(&self, _m: &dyn Measure) -> FirstVariation {
        let c = self.coeffs.clone();
        FirstVariation::new(move |x| Self::eval(&c, x))
    }

    fn second_variation(&self, _m: &dyn Measure) -> Option<SecondVariation> {
        Some(SecondVariation::new(|_, _| [0.0; 2]))
    }

    fn is_linear(&self) -> bool {
        true
    }
}

/// `l = ½v²`, `H = −½p²`, `v̂ = −p`, `h = ½·curvature·x²`.
#[derive(Debug, Clone, Copy)]
pub struct QuadraticControl {
    pub terminal_curvature: f64,
}

impl LocalCoefficients for QuadraticControl {
    fn hamiltonian(&self, _s: f64, _x: f64, p: f64) -> f64 {
        -0.5 * p * p
    }
    fn hamiltonian_dp(&self, _s: f64, _x: f64, p: f64) -> f64 {
        -p
    }
    fn hamiltonian_dx(&self, _s: f64, _x: f64, _p: f64) -> f64 {
        0.0
    }
    fn hamiltonian_dpp(&self, _s: f64, _x: f64, _p: f64) -> f64 {
        -1.0
    }
    fn running_cost(&self, _s: f64, _x: f64, v: f64) -> f64 {
        0.5 * v * v
    }
    fn running_cost_dv(&self, _s: f64, _x: f64, v: f64) -> f64 {
        v
    }
    fn running_cost_dx(&self, _s: f64, _x: f64, _v: f64) -> f64 {
        0.0
    }
    fn minimizer(&self, _s: f64, _x: f64, p: f64) -> f64 {
        -p
    }
    fn terminal(&self, x: f64) -> f64 {
        0.5 * self.terminal_curvature * x * x
    }
    fn terminal_dx(&self, x: f64) -> f64 {
        self.terminal_curvature * x
    }
    fn terminal_dxx(&self, _x: f64) -> f64 {
        self.terminal_curvature
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FamilyTag {
    LqMeanField,
    ColeHopf,
    Custom,
}

impl fmt::Display for FamilyTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FamilyTag::LqMeanField => "LQ_MEANFIELD",
            FamilyTag::ColeHopf => "COLE_HOPF",
            FamilyTag::Custom => "CUSTOM",
        })
    }
}

#[derive(Debug, Clone)]
pub enum BuiltinFamily {
    /// `l = ½v²`, `h = ½h_T x²`, `F = ½q̄ m̄²`, `F_T = ½q̄_T m̄²`.
    LqMeanField {
        mean_coupling: f64,
        terminal_curvature: f64,
        terminal_mean_coupling: f64,
    },
    /// `l = ½v²`, `h = ½κx²`, no mean-field terms.
    ColeHopf { terminal_curvature: f64 },
    Custom {
        local: Arc<dyn LocalCoefficients>,
        running: Arc<dyn MeanFieldTerm>,
        terminal: Arc<dyn MeanFieldTerm>,
        /// The caller vouches for convexity of l, h and the first variations in x.
        convex: bool,
    },
}

impl BuiltinFamily {
    pub fn tag(&self) -> FamilyTag {
        match self {
            BuiltinFamily::LqMeanField { .. } => FamilyTag::LqMeanField,
            BuiltinFamily::ColeHopf { .. } => FamilyTag::ColeHopf,
            BuiltinFamily::Custom { .. } => FamilyTag::Custom,
        }
    }
}

/// The generic constants `c`, `c_T`, `δ` of the growth assumptions, the
/// convexity modulus `λ` and the weight exponent `γ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssumptionConstants {
    pub c: f64,
    pub c_t: f64,
    pub delta: f64,
    pub lambda: f64,
    pub gamma: f64,
}

impl AssumptionConstants {
    pub fn validate(&self, dim: usize) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidInput(what.to_string()));
        if !(self.c > 0.0 && self.c.is_finite()) {
            return bad("constant c must be positive");
        }
        // c_T = 0 is allowed: it is the natural value for zero terminal data.
        if !(self.c_t >= 0.0 && self.c_t.is_finite()) {
            return bad("constant c_T must be non-negative");
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return bad("constant delta must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("constant lambda must be non-negative");
        }
        if !(self.gamma > dim as f64 / 2.0 + 3.0) {
            return bad("weight exponent gamma must exceed dim/2 + 3");
        }
        Ok(())
    }
}

impl Default for AssumptionConstants {
    fn default() -> Self {
        Self {
            c: 1.0,
            c_t: 1.0,
            delta: 1.0,
            lambda: 0.5,
            gamma: 4.0,
        }
    }
}

/// Immutable problem data.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    dim: usize,
    t0: f64,
    t1: f64,
    sigma: f64,
    family: BuiltinFamily,
    local: Arc<dyn LocalCoefficients>,
    running: Arc<dyn MeanFieldTerm>,
    terminal: Arc<dyn MeanFieldTerm>,
    constants: AssumptionConstants,
    convex: bool,
}

impl ModelSpec {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> (f64, f64) {
        (self.t0, self.t1)
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// `a = σσᵀ`.
    pub fn a(&self) -> f64 {
        self.sigma * self.sigma
    }

    pub fn family(&self) -> &BuiltinFamily {
        &self.family
    }

    pub fn local(&self) -> &dyn LocalCoefficients {
        self.local.as_ref()
    }

    pub fn running(&self) -> &dyn MeanFieldTerm {
        self.running.as_ref()
    }

    pub fn terminal(&self) -> &dyn MeanFieldTerm {
        self.terminal.as_ref()
    }

    pub fn constants(&self) -> &AssumptionConstants {
        &self.constants
    }

    /// Convexity of `l`, `h` and the first variations, with `λ > 0`.
    pub fn is_convex(&self) -> bool {
        self.convex && self.constants.lambda > 0.0
    }

    /// True when neither cost term depends on the measure.
    pub fn is_decoupled(&self) -> bool {
        matches!(
            self.family,
            BuiltinFamily::ColeHopf { .. }
                | BuiltinFamily::LqMeanField {
                    mean_coupling: 0.0,
                    terminal_mean_coupling: 0.0,
                    ..
                }
        )
    }

    /// Same data on a different horizon (used for restarts).
    pub fn with_horizon(&self, t0: f64, t1: f64) -> Result<Self> {
        check_horizon(t0, t1)?;
        Ok(Self {
            t0,
            t1,
            ..self.clone()
        })
    }

    pub fn with_constants(&self, constants: AssumptionConstants) -> Result<Self> {
        constants.validate(self.dim)?;
        Ok(Self {
            constants,
            ..self.clone()
        })
    }
}

fn check_horizon(t0: f64, t1: f64) -> Result<()> {
    if !(t0.is_finite() && t1.is_finite()) || t0 < 0.0 || t1 <= t0 {
        return Err(Error::InvalidInput(format!(
            "horizon ({t0}, {t1}) must satisfy T > t >= 0"
        )));
    }
    Ok(())
}

type Parts = (
    Arc<dyn LocalCoefficients>,
    Arc<dyn MeanFieldTerm>,
    Arc<dyn MeanFieldTerm>,
    bool,
);

/// Builds a model from a family, horizon `(t, T)` and the row-major `n×n`
/// volatility matrix.
pub fn build_model(
    family: BuiltinFamily,
    horizon: (f64, f64),
    sigma: &[f64],
    constants: AssumptionConstants,
) -> Result<ModelSpec> {
    check_horizon(horizon.0, horizon.1)?;
    let dim = (sigma.len() as f64).sqrt().round() as usize;
    if dim == 0 || dim * dim != sigma.len() {
        return Err(Error::InvalidInput(format!(
            "sigma must be a square matrix, got {} entries",
            sigma.len()
        )));
    }
    if dim != 1 {
        return Err(Error::Unsupported(format!(
            "state dimension {dim}; the solvers handle dimension 1 only"
        )));
    }
    let s = sigma[0];
    if !s.is_finite() || s * s < 1e-14 {
        return Err(Error::SingularSigma {
            min_eigenvalue: s * s,
        });
    }
    constants.validate(dim)?;

    let (local, running, terminal, convex): Parts = match &family {
        BuiltinFamily::LqMeanField {
            mean_coupling,
            terminal_curvature,
            terminal_mean_coupling,
        } => {
            for (name, v) in [
                ("mean_coupling", mean_coupling),
                ("terminal_curvature", terminal_curvature),
                ("terminal_mean_coupling", terminal_mean_coupling),
            ] {
                if !v.is_finite() || *v < 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "LQ parameter {name} must be finite and non-negative"
                    )));
                }
            }
            (
                Arc::new(QuadraticControl {
                    terminal_curvature: *terminal_curvature,
                }),
                Arc::new(SquaredMean {
                    weight: *mean_coupling,
                }),
                Arc::new(SquaredMean {
                    weight: *terminal_mean_coupling,
                }),
                true,
            )
        }
        BuiltinFamily::ColeHopf { terminal_curvature } => {
            if !terminal_curvature.is_finite() || *terminal_curvature < 0.0 {
                return Err(Error::InvalidInput(
                    "Cole-Hopf terminal curvature must be finite and non-negative".into(),
                ));
            }
            (
                Arc::new(QuadraticControl {
                    terminal_curvature: *terminal_curvature,
                }),
                Arc::new(NoCoupling),
                Arc::new(NoCoupling),
                true,
            )
        }
        BuiltinFamily::Custom {
            local,
            running,
            terminal,
            convex,
        } => (local.clone(), running.clone(), terminal.clone(), *convex),
    };

    let model = ModelSpec {
        dim,
        t0: horizon.0,
        t1: horizon.1,
        sigma: s,
        family,
        local,
        running,
        terminal,
        constants,
        convex,
    };
    check_compatibility(&model)?;
    Ok(model)
}

/// Fixed audit sample: a lattice in (s, x, p) over the horizon.
fn audit_lattice(model: &ModelSpec) -> Vec<(f64, f64, f64)> {
    let (t0, t1) = model.horizon();
    let mut pts = Vec::new();
    for k in 0..3 {
        let s = t0 + (t1 - t0) * k as f64 / 2.0;
        for i in -4..=4 {
            for j in -4..=4 {
                pts.push((s, 2.0 * i as f64, 2.5 * j as f64));
            }
        }
    }
    pts
}

fn check_compatibility(model: &ModelSpec) -> Result<()> {
    let l = model.local();
    for (s, x, p) in audit_lattice(model) {
        let v = l.minimizer(s, x, p);
        let scale = 1.0 + p.abs() + v.abs();
        let r1 = l.running_cost_dv(s, x, v) + p;
        if !(r1.abs() <= 1e-8 * scale) {
            return Err(Error::AssumptionViolation {
                check: "minimizer: D_v l(s,x,v̂) + p = 0".into(),
                s,
                x,
                p,
                detail: format!("residual {r1:e}"),
            });
        }
        let r2 = l.hamiltonian_dp(s, x, p) - v;
        if !(r2.abs() <= 1e-8 * scale) {
            return Err(Error::AssumptionViolation {
                check: "D_pH = v̂".into(),
                s,
                x,
                p,
                detail: format!("residual {r2:e}"),
            });
        }
        let r3 = l.hamiltonian(s, x, p) - (l.running_cost(s, x, v) + p * v);
        if !(r3.abs() <= 1e-8 * (1.0 + p * p + x * x)) {
            return Err(Error::AssumptionViolation {
                check: "H = l(v̂) + p·v̂".into(),
                s,
                x,
                p,
                detail: format!("residual {r3:e}"),
            });
        }
    }
    Ok(())
}

/// One audited inequality: the largest observed ratio `|lhs| / bound`.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditCheck {
    pub name: &'static str,
    pub max_ratio: f64,
    /// `(s, x, p)` where the maximum was attained (p unused for some checks).
    pub worst: (f64, f64, f64),
}

impl AuditCheck {
    /// Ratio at most one, up to rounding.
    pub fn passed(&self) -> bool {
        self.max_ratio <= 1.0 + 1e-12
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub samples: usize,
    pub checks: Vec<AuditCheck>,
}

impl AuditReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(AuditCheck::passed)
    }

    pub fn get(&self, name: &str) -> Option<&AuditCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

struct Tracker(AuditCheck);

impl Tracker {
    fn new(name: &'static str) -> Self {
        Self(AuditCheck {
            name,
            max_ratio: 0.0,
            worst: (0.0, 0.0, 0.0),
        })
    }

    fn observe(&mut self, lhs: f64, bound: f64, at: (f64, f64, f64)) {
        let r = if bound > 0.0 {
            lhs.abs() / bound
        } else if lhs == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        if r > self.0.max_ratio || r.is_nan() {
            self.0.max_ratio = if r.is_nan() { f64::INFINITY } else { r };
            self.0.worst = at;
        }
    }
}

/// Sample points: the fixed lattice, the box corners (|x| = 8, |p| = 10), and
/// `sample_budget` pseudo-random points from a fixed stream.
fn sample_points(model: &ModelSpec, sample_budget: usize) -> Vec<(f64, f64, f64)> {
    let (t0, t1) = model.horizon();
    let mut pts = audit_lattice(model);
    for s in [t0, t1] {
        for x in [-8.0, 8.0] {
            for p in [-10.0, 10.0] {
                pts.push((s, x, p));
            }
        }
    }
    let mut r = rng::stream(0, Purpose::ConstantAudit, 0);
    for _ in 0..sample_budget {
        let s = t0 + (t1 - t0) * rng::uniform(&mut r);
        let x = -8.0 + 16.0 * rng::uniform(&mut r);
        let p = -10.0 + 20.0 * rng::uniform(&mut r);
        pts.push((s, x, p));
    }
    pts
}

/// Test measures for the mean-field growth checks. The growth bounds are
/// uniform in m, which mean-coupled costs only satisfy for bounded means, so
/// the audit uses means in [−1, 1].
fn audit_measures() -> Vec<GridDensity> {
    let grid = Grid1D::new(-8.0, 8.0, 321).expect("static grid");
    let mut out = Vec::new();
    for mean in [-1.0, 0.0, 1.0] {
        for std in [0.5, 1.0, 2.0] {
            out.push(GridDensity::gaussian(grid, mean, std).expect("static density"));
        }
    }
    out
}

/// Reports the largest ratios of each growth assumption over a sample.
pub fn audit_assumptions(model: &ModelSpec, sample_budget: usize) -> AuditReport {
    let k = model.constants();
    let l = model.local();
    let pts = sample_points(model, sample_budget.max(1));

    let mut h_growth = Tracker::new("h_growth");
    let mut dh_growth = Tracker::new("dh_growth");
    let mut d2h_bound = Tracker::new("d2h_bound");
    let mut ham = Tracker::new("hamiltonian_growth");
    let mut ham_dx = Tracker::new("hamiltonian_dx_growth");
    let mut ham_dp = Tracker::new("hamiltonian_dp_growth");
    let mut f_val = Tracker::new("running_mf_value_growth");
    let mut f_var = Tracker::new("running_mf_derivative_growth");
    let mut f_dvar = Tracker::new("running_mf_gradient_growth");
    let mut ft_val = Tracker::new("terminal_mf_value_growth");
    let mut ft_var = Tracker::new("terminal_mf_derivative_growth");
    let mut ft_dvar = Tracker::new("terminal_mf_gradient_growth");
    let mut ft_d2var = Tracker::new("terminal_mf_hessian_bound");

    for &(s, x, p) in &pts {
        h_growth.observe(l.terminal(x), k.c_t * (1.0 + x * x), (s, x, p));
        dh_growth.observe(l.terminal_dx(x), k.c_t * (1.0 + x.abs()), (s, x, p));
        d2h_bound.observe(l.terminal_dxx(x), k.c_t, (s, x, p));
        ham.observe(
            l.hamiltonian(s, x, p),
            k.c * (1.0 + x * x) + 0.5 * k.delta * p * p,
            (s, x, p),
        );
        let lin = k.c * (1.0 + x.abs() + p.abs());
        ham_dx.observe(l.hamiltonian_dx(s, x, p), lin, (s, x, p));
        ham_dp.observe(l.hamiltonian_dp(s, x, p), lin, (s, x, p));
    }

    for m in audit_measures() {
        let m2 = m.integrate(&|x| x * x);
        f_val.observe(
            model.running().value(&m),
            k.c * (1.0 + m2),
            (0.0, m.mean(), 0.0),
        );
        ft_val.observe(
            model.terminal().value(&m),
            k.c_t * (1.0 + m2),
            (0.0, m.mean(), 0.0),
        );
        let fv = model.running().first_variation(&m);
        let ftv = model.terminal().first_variation(&m);
        for &(s, x, _) in pts.iter().step_by(7) {
            let [v, d, _] = fv.eval(x);
            f_var.observe(v, k.c * (1.0 + x * x), (s, x, 0.0));
            f_dvar.observe(d, k.c * (1.0 + x.abs()), (s, x, 0.0));
            let [v, d, dd] = ftv.eval(x);
            ft_var.observe(v, k.c_t * (1.0 + x * x), (s, x, 0.0));
            ft_dvar.observe(d, k.c_t * (1.0 + x.abs()), (s, x, 0.0));
            ft_d2var.observe(dd, k.c_t, (s, x, 0.0));
        }
    }

    AuditReport {
        samples: pts.len(),
        checks: [
            h_growth, dh_growth, d2h_bound, ham, ham_dx, ham_dp, f_val, f_var, f_dvar, ft_val,
            ft_var, ft_dvar, ft_d2var,
        ]
        .into_iter()
        .map(|t| t.0)
        .collect(),
    }
}

/// Fits `c`, `c_T`, `δ` as the smallest values making every sampled ratio
/// of [`audit_assumptions`] at most one. `λ` and `γ` are taken from `base`.
/// The result is a sample maximum, not a certified supremum.
pub fn estimate_constants(
    model: &ModelSpec,
    sample_budget: usize,
    base: AssumptionConstants,
) -> AssumptionConstants {
    let l = model.local();
    let pts = sample_points(model, sample_budget.max(1));
    let floor = 1e-6;

    // δ from the quadratic part of H at large |p|.
    let mut delta: f64 = floor;
    for &(s, x, p) in &pts {
        if p.abs() >= 1.0 {
            let excess = l.hamiltonian(s, x, p).abs();
            delta = delta.max(2.0 * excess / (p * p + 1.0 + x * x));
        }
    }
    let mut c: f64 = floor;
    let mut c_t: f64 = 0.0;
    for &(s, x, p) in &pts {
        let h = l.hamiltonian(s, x, p).abs();
        c = c.max((h - 0.5 * delta * p * p).max(0.0) / (1.0 + x * x));
        let lin = 1.0 + x.abs() + p.abs();
        c = c.max(l.hamiltonian_dx(s, x, p).abs() / lin);
        c = c.max(l.hamiltonian_dp(s, x, p).abs() / lin);
        c_t = c_t.max(l.terminal(x).abs() / (1.0 + x * x));
        c_t = c_t.max(l.terminal_dx(x).abs() / (1.0 + x.abs()));
        c_t = c_t.max(l.terminal_dxx(x).abs());
    }
    for m in audit_measures() {
        let m2 = m.integrate(&|x| x * x);
        c = c.max(model.running().value(&m).abs() / (1.0 + m2));
        c_t = c_t.max(model.terminal().value(&m).abs() / (1.0 + m2));
        let fv = model.running().first_variation(&m);
        let ftv = model.terminal().first_variation(&m);
        for &(_, x, _) in pts.iter().step_by(7) {
            let [v, d, _] = fv.eval(x);
            c = c
                .max(v.abs() / (1.0 + x * x))
                .max(d.abs() / (1.0 + x.abs()));
            let [v, d, dd] = ftv.eval(x);
            c_t = c_t
                .max(v.abs() / (1.0 + x * x))
                .max(d.abs() / (1.0 + x.abs()))
                .max(dd.abs());
        }
    }
    AssumptionConstants {
        c,
        c_t,
        delta,
        ..base
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::ParticleEnsemble;

    fn lq(q: f64) -> ModelSpec {
        build_model(
            BuiltinFamily::LqMeanField {
                mean_coupling: q,
                terminal_curvature: 1.0,
                terminal_mean_coupling: 0.5,
            },
            (0.0, 0.5),
            &[1.0],
            AssumptionConstants::default(),
        )
        .unwrap()
    }

    #[test]
    fn cole_hopf_coefficients() {
        let m = build_model(
            BuiltinFamily::ColeHopf {
                terminal_curvature: 1.0,
            },
            (0.0, 1.0),
            &[1.0],
            AssumptionConstants::default(),
        )
        .unwrap();
        let l = m.local();
        assert_eq!(l.hamiltonian(0.1, 2.0, 3.0), -4.5);
        assert_eq!(l.minimizer(0.1, 2.0, 3.0), -3.0);
        assert_eq!(l.terminal(2.0), 2.0);
        assert!(m.is_decoupled());
    }

    #[test]
    fn lq_variations() {
        let m = lq(1.0);
        let ens = ParticleEnsemble::new(vec![1.0, 2.0], vec![0.5, 0.5], 0).unwrap();
        let fv = m.running().first_variation(&ens);
        assert!((fv.value(2.0) - 3.0).abs() < 1e-15);
        let sv = m.running().second_variation(&ens).unwrap();
        assert_eq!(sv.value(2.0, 3.0), 6.0);
        assert_eq!(sv.value(3.0, 2.0), 6.0);
        assert!((m.running().value(&ens) - 1.125).abs() < 1e-15);
    }

    #[test]
    fn singular_and_unsupported_sigma() {
        let fam = BuiltinFamily::ColeHopf {
            terminal_curvature: 1.0,
        };
        assert!(matches!(
            build_model(
                fam.clone(),
                (0.0, 1.0),
                &[0.0],
                AssumptionConstants::default()
            ),
            Err(Error::SingularSigma { .. })
        ));
        assert!(matches!(
            build_model(
                fam,
                (0.0, 1.0),
                &[1.0, 0.0, 0.0, 1.0],
                AssumptionConstants::default()
            ),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn polynomial_moment_derivatives() {
        let p = PolynomialMoment {
            coeffs: vec![1.0, -2.0, 3.0],
        };
        let fv = p.first_variation(&ParticleEnsemble::new(vec![0.0], vec![1.0], 0).unwrap());
        let [v, d, dd] = fv.eval(2.0);
        assert_eq!(v, 1.0 - 4.0 + 12.0);
        assert_eq!(d, -2.0 + 12.0);
        assert_eq!(dd, 6.0);
    }

    #[test]
    fn lq_audit_passes_with_forced_constants() {
        let report = audit_assumptions(&lq(1.0), 200);
        assert!(report.all_passed(), "{report:?}");
        assert!(report.get("dh_growth").unwrap().max_ratio <= 1.0);
    }

    #[test]
    fn estimated_constants_make_audit_pass() {
        let m = lq(1.0);
        let k = estimate_constants(&m, 500, AssumptionConstants::default());
        assert!((k.delta - 1.0).abs() < 0.1);
        let m2 = m.with_constants(k).unwrap();
        assert!(audit_assumptions(&m2, 500).all_passed());
    }
}

//! Independent reference solutions, built only from quadrature, an ODE
//! integrator and plain Monte Carlo (no use of the PDE solvers):
//!
//! * the Cole–Hopf solution of `−V_s − (a/2)V'' + ½V'² = 0`, `V(T) = ½κx²`;
//! * the LQ mean-field system `V = ½P x² + r x + k` with mean `m̄`;
//! * Monte-Carlo Feynman–Kac expectations along Euler paths.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{ScalarField, VectorField};
use crate::grid::{Grid1D, TimeMesh};
use crate::measure::{GridDensity, InverseCdf, Measure};
use crate::model::ModelSpec;
use crate::rng::{self, Purpose};

// ---------------------------------------------------------------------------
// ODE integration

/// Classical RK4 with step doubling; integrates `y' = f(s, y)` from `s0` to
/// `s1` with local error per step below `tol·(1 + |y|)`.
pub fn integrate_rk4(
    f: &dyn Fn(f64, &[f64]) -> Vec<f64>,
    s0: f64,
    s1: f64,
    y0: &[f64],
    tol: f64,
) -> Vec<f64> {
    let mut s = s0;
    let mut y = y0.to_vec();
    let total = s1 - s0;
    if total == 0.0 {
        return y;
    }
    let mut h = total;
    while (s1 - s) * total.signum() > 0.0 {
        if (s + h - s1) * total.signum() > 0.0 {
            h = s1 - s;
        }
        let full = rk4_step(f, s, &y, h);
        let half = rk4_step(f, s, &y, 0.5 * h);
        let two = rk4_step(f, s + 0.5 * h, &half, 0.5 * h);
        let err = full
            .iter()
            .zip(&two)
            .map(|(a, b)| (a - b).abs() / (1.0 + b.abs()))
            .fold(0.0, f64::max)
            / 15.0;
        if err <= tol || h.abs() < 1e-12 * total.abs() {
            // Richardson-extrapolated update.
            y = two
                .iter()
                .zip(&full)
                .map(|(b, a)| b + (b - a) / 15.0)
                .collect();
            s += h;
            if err < tol / 64.0 {
                h *= 2.0;
            }
        } else {
            h *= 0.5;
        }
    }
    y
}

fn rk4_step(f: &dyn Fn(f64, &[f64]) -> Vec<f64>, s: f64, y: &[f64], h: f64) -> Vec<f64> {
    let add = |y: &[f64], k: &[f64], c: f64| -> Vec<f64> {
        y.iter().zip(k).map(|(a, b)| a + c * b).collect()
    };
    let k1 = f(s, y);
    let k2 = f(s + 0.5 * h, &add(y, &k1, 0.5 * h));
    let k3 = f(s + 0.5 * h, &add(y, &k2, 0.5 * h));
    let k4 = f(s + h, &add(y, &k3, h));
    (0..y.len())
        .map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// Solution stored at uniform nodes, evaluated by cubic Hermite interpolation
/// with derivatives from the right-hand side.
#[derive(Debug, Clone)]
struct DenseTrajectory {
    s0: f64,
    h: f64,
    states: Vec<Vec<f64>>,
    slopes: Vec<Vec<f64>>,
}

impl DenseTrajectory {
    fn integrate(
        f: &dyn Fn(f64, &[f64]) -> Vec<f64>,
        s0: f64,
        s1: f64,
        y0: &[f64],
        intervals: usize,
        tol: f64,
    ) -> Self {
        let h = (s1 - s0) / intervals as f64;
        let mut states = Vec::with_capacity(intervals + 1);
        states.push(y0.to_vec());
        for i in 0..intervals {
            let a = s0 + i as f64 * h;
            let b = if i + 1 == intervals { s1 } else { a + h };
            let next = integrate_rk4(f, a, b, &states[i], tol);
            states.push(next);
        }
        let slopes = states
            .iter()
            .enumerate()
            .map(|(i, y)| f(s0 + i as f64 * h, y))
            .collect();
        Self {
            s0,
            h,
            states,
            slopes,
        }
    }

    fn eval(&self, s: f64, component: usize) -> f64 {
        let n = self.states.len() - 1;
        let t = ((s - self.s0) / self.h).clamp(0.0, n as f64);
        let i = (t.floor() as usize).min(n - 1);
        let u = t - i as f64;
        let (y0, y1) = (self.states[i][component], self.states[i + 1][component]);
        let (d0, d1) = (
            self.slopes[i][component] * self.h,
            self.slopes[i + 1][component] * self.h,
        );
        let h00 = 2.0 * u * u * u - 3.0 * u * u + 1.0;
        let h10 = u * u * u - 2.0 * u * u + u;
        let h01 = -2.0 * u * u * u + 3.0 * u * u;
        let h11 = u * u * u - u * u;
        h00 * y0 + h10 * d0 + h01 * y1 + h11 * d1
    }

    fn last(&self) -> &[f64] {
        self.states.last().unwrap()
    }

    /// Largest |fourth-order central difference − f| over interior nodes.
    fn max_residual(&self, f: &dyn Fn(f64, &[f64]) -> Vec<f64>) -> f64 {
        let n = self.states.len();
        let mut worst: f64 = 0.0;
        for i in 2..n - 2 {
            let s = self.s0 + i as f64 * self.h;
            let rhs = f(s, &self.states[i]);
            for (c, r) in rhs.iter().enumerate() {
                let d = (-self.states[i + 2][c] + 8.0 * self.states[i + 1][c]
                    - 8.0 * self.states[i - 1][c]
                    + self.states[i - 2][c])
                    / (12.0 * self.h);
                worst = worst.max((d - r).abs());
            }
        }
        worst
    }
}

// ---------------------------------------------------------------------------
// LQ mean-field oracle

/// Parameters of the LQ mean-field family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LqParams {
    /// Running coupling `q̄` in `F(m) = ½q̄ m̄²`.
    pub mean_coupling: f64,
    /// `h_T` in `h(x) = ½h_T x²`.
    pub terminal_curvature: f64,
    /// `q̄_T` in `F_T(m) = ½q̄_T m̄²`.
    pub terminal_mean_coupling: f64,
    /// `a = σ²`.
    pub a: f64,
}

// State layout of the forward system.
const P: usize = 0;
const MBAR: usize = 1;
const R: usize = 2;
const S2: usize = 3;
const COST: usize = 4;
const KINT: usize = 5;
const GAMMA: usize = 6;
const ALPHA: usize = 7;
const BINT: usize = 8;
const DIM: usize = 9;

/// Dense solution of
/// `P' = P²`, `r' = Pr − q̄m̄`, `m̄' = −(Pm̄ + r)`, `k' = ½r² − (a/2)P`,
/// with `P(T) = h_T`, `r(T) = q̄_T m̄(T)`, `k(T) = 0`, `m̄(t) = m̄₀`; plus the
/// second moment, the running cost, and the sensitivity pair
/// `Γ = ∂m̄/∂m̄₀`, `α = ∂r/∂m̄₀` (`α' = Pα − q̄Γ`, `α(T) = q̄_TΓ(T)`) and
/// `β' = rα`, `β(T) = 0`.
#[derive(Debug, Clone)]
pub struct LQClosedForm {
    pub params: LqParams,
    pub horizon: (f64, f64),
    pub m0_mean: f64,
    pub m0_second_moment: f64,
    traj: DenseTrajectory,
    /// Terminal shooting residuals `r(T) − q̄_T m̄(T)` and `α(T) − q̄_TΓ(T)`.
    pub shooting_residual: f64,
}

const ORACLE_INTERVALS: usize = 4000;
const ORACLE_TOL: f64 = 1e-14;

fn lq_rhs(p: LqParams) -> impl Fn(f64, &[f64]) -> Vec<f64> {
    move |_s, y| {
        let (pp, m, r, s2) = (y[P], y[MBAR], y[R], y[S2]);
        let mut d = vec![0.0; DIM];
        d[P] = pp * pp;
        d[MBAR] = -(pp * m + r);
        d[R] = pp * r - p.mean_coupling * m;
        d[S2] = -2.0 * (pp * s2 + r * m) + p.a;
        d[COST] = 0.5 * (pp * pp * s2 + 2.0 * pp * r * m + r * r) + 0.5 * p.mean_coupling * m * m;
        d[KINT] = 0.5 * r * r - 0.5 * p.a * pp;
        d[GAMMA] = -(pp * y[GAMMA] + y[ALPHA]);
        d[ALPHA] = pp * y[ALPHA] - p.mean_coupling * y[GAMMA];
        d[BINT] = r * y[ALPHA];
        d
    }
}

/// Integrates the LQ system by shooting on `r(t)` and `α(t)`.
pub fn lq_closed_form(
    params: LqParams,
    horizon: (f64, f64),
    m0_mean: f64,
    m0_second_moment: f64,
) -> Result<LQClosedForm> {
    let (t0, t1) = horizon;
    if !(t1 > t0) {
        return Err(Error::InvalidInput(
            "oracle horizon must be increasing".into(),
        ));
    }
    // P(t) from the backward Riccati equation alone.
    let p_t = integrate_rk4(
        &|_s, y: &[f64]| vec![y[0] * y[0]],
        t1,
        t0,
        &[params.terminal_curvature],
        ORACLE_TOL,
    )[0];
    let rhs = lq_rhs(params);
    let end_state = |rho: f64, alpha0: f64| -> Vec<f64> {
        let mut y0 = vec![0.0; DIM];
        y0[P] = p_t;
        y0[MBAR] = m0_mean;
        y0[R] = rho;
        y0[S2] = m0_second_moment;
        y0[GAMMA] = 1.0;
        y0[ALPHA] = alpha0;
        integrate_rk4(&rhs, t0, t1, &y0, ORACLE_TOL)
    };
    let residuals = |y: &[f64]| {
        (
            y[R] - params.terminal_mean_coupling * y[MBAR],
            y[ALPHA] - params.terminal_mean_coupling * y[GAMMA],
        )
    };
    // Both residuals are affine in the unknowns; secant steps from the
    // decoupled guess (0, 0), repeated while the residual keeps dropping.
    let (mut rho, mut alpha) = (0.0, 0.0);
    let mut best = f64::INFINITY;
    for _ in 0..5 {
        let (ra, aa) = residuals(&end_state(rho, alpha));
        let (rb, ab) = residuals(&end_state(rho + 1.0, alpha + 1.0));
        let (dr, da) = (rb - ra, ab - aa);
        if dr == 0.0 || da == 0.0 {
            return Err(Error::ShootingDivergence {
                residual: ra.abs().max(aa.abs()),
            });
        }
        rho -= ra / dr;
        alpha -= aa / da;
        let (r1, a1) = residuals(&end_state(rho, alpha));
        let res = r1.abs().max(a1.abs());
        if res <= 1e-12 {
            best = res;
            break;
        }
        if res >= best {
            return Err(Error::ShootingDivergence { residual: res });
        }
        best = res;
    }
    if !(best <= 1e-10) {
        return Err(Error::ShootingDivergence { residual: best });
    }
    let mut y0 = vec![0.0; DIM];
    y0[P] = p_t;
    y0[MBAR] = m0_mean;
    y0[R] = rho;
    y0[S2] = m0_second_moment;
    y0[GAMMA] = 1.0;
    y0[ALPHA] = alpha;
    let traj = DenseTrajectory::integrate(&rhs, t0, t1, &y0, ORACLE_INTERVALS, ORACLE_TOL);
    Ok(LQClosedForm {
        params,
        horizon,
        m0_mean,
        m0_second_moment,
        traj,
        shooting_residual: best,
    })
}

impl LQClosedForm {
    /// Oracle for a model of the LQ family and an initial measure.
    pub fn for_model(model: &ModelSpec, m0: &dyn Measure) -> Result<Self> {
        let params = match model.family() {
            crate::model::BuiltinFamily::LqMeanField {
                mean_coupling,
                terminal_curvature,
                terminal_mean_coupling,
            } => LqParams {
                mean_coupling: *mean_coupling,
                terminal_curvature: *terminal_curvature,
                terminal_mean_coupling: *terminal_mean_coupling,
                a: model.a(),
            },
            other => {
                return Err(Error::InvalidInput(format!(
                    "LQ oracle needs the LQ family, got {}",
                    other.tag()
                )))
            }
        };
        lq_closed_form(params, model.horizon(), m0.mean(), m0.integrate(&|x| x * x))
    }

    pub fn p(&self, s: f64) -> f64 {
        self.traj.eval(s, P)
    }

    pub fn r(&self, s: f64) -> f64 {
        self.traj.eval(s, R)
    }

    pub fn k(&self, s: f64) -> f64 {
        self.traj.eval(s, KINT) - self.traj.last()[KINT]
    }

    pub fn mbar(&self, s: f64) -> f64 {
        self.traj.eval(s, MBAR)
    }

    pub fn second_moment(&self, s: f64) -> f64 {
        self.traj.eval(s, S2)
    }

    /// `∂m̄_s/∂m̄_t`.
    pub fn mean_sensitivity(&self, s: f64) -> f64 {
        self.traj.eval(s, GAMMA)
    }

    /// Coefficient `α(s)` of `x·z` in the derivative field `V̄(s,x,z)`.
    pub fn bilinear(&self, s: f64) -> f64 {
        self.traj.eval(s, ALPHA)
    }

    /// Coefficient `β(s)` of `z` in `V̄(s,x,z)`.
    pub fn lower_order(&self, s: f64) -> f64 {
        self.traj.eval(s, BINT) - self.traj.last()[BINT]
    }

    pub fn value(&self, s: f64, x: f64) -> f64 {
        0.5 * self.p(s) * x * x + self.r(s) * x + self.k(s)
    }

    pub fn gradient(&self, s: f64, x: f64) -> f64 {
        self.p(s) * x + self.r(s)
    }

    /// Optimal feedback `−(P x + r)`.
    pub fn policy(&self, s: f64, x: f64) -> f64 {
        -self.gradient(s, x)
    }

    /// `Φ(t, m₀)`: running cost plus terminal cost along the optimal flow.
    pub fn phi(&self) -> f64 {
        let y = self.traj.last();
        let p = &self.params;
        y[COST]
            + 0.5 * p.terminal_curvature * y[S2]
            + 0.5 * p.terminal_mean_coupling * y[MBAR] * y[MBAR]
    }

    /// `d/dε Φ(t, (I + ε)#m₀)` at ε = 0, by a central difference of the
    /// oracle itself (both moments move with the shift).
    pub fn mean_shift_derivative(&self) -> Result<f64> {
        let eps = 1e-4;
        let shifted = |e: f64| -> Result<f64> {
            let m = self.m0_mean + e;
            let s2 = self.m0_second_moment + 2.0 * e * self.m0_mean + e * e;
            Ok(lq_closed_form(self.params, self.horizon, m, s2)?.phi())
        };
        Ok((shifted(eps)? - shifted(-eps)?) / (2.0 * eps))
    }

    /// Largest residual of the ODE system at the stored nodes.
    pub fn max_ode_residual(&self) -> f64 {
        self.traj.max_residual(&lq_rhs(self.params))
    }

    pub fn value_field(&self, mesh: &TimeMesh, grid: &Grid1D) -> Result<ScalarField> {
        ScalarField::from_fn(*mesh, *grid, |s, x| self.value(s, x))
    }

    pub fn gradient_field(&self, mesh: &TimeMesh, grid: &Grid1D) -> Result<VectorField> {
        VectorField::from_fn(*mesh, *grid, |s, x| self.gradient(s, x))
    }

    /// `sup_s (|P(s)| + |r(s)|)`, a growth rate for `|DV| ≤ C(1+|x|)`.
    pub fn gradient_growth(&self) -> f64 {
        let (t0, t1) = self.horizon;
        (0..=200)
            .map(|i| {
                let s = t0 + (t1 - t0) * i as f64 / 200.0;
                self.p(s).abs() + self.r(s).abs()
            })
            .fold(0.0, f64::max)
    }
}

// ---------------------------------------------------------------------------
// Cole–Hopf oracle

/// `V*(s,x) = −a ln w(s,x)` with `w(s,·) = N(0, a(T−s)) * exp(−h/a)`,
/// `h(x) = ½κx²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColeHopfOracle {
    pub curvature: f64,
    pub a: f64,
    pub terminal_time: f64,
}

impl ColeHopfOracle {
    pub fn new(curvature: f64, a: f64, terminal_time: f64) -> Result<Self> {
        if !(curvature > 0.0) || !(a > 0.0) {
            return Err(Error::InvalidInput(
                "Cole-Hopf oracle needs positive curvature and diffusion".into(),
            ));
        }
        Ok(Self {
            curvature,
            a,
            terminal_time,
        })
    }

    /// `κx²/(2(1+κτ)) + (a/2) ln(1+κτ)`, `τ = T − s`.
    pub fn closed_form(&self, s: f64, x: f64) -> f64 {
        let k = self.curvature;
        let q = 1.0 + k * (self.terminal_time - s);
        k * x * x / (2.0 * q) + 0.5 * self.a * q.ln()
    }

    /// `(∂_s V*, ∂_x V*, ∂_xx V*)` of the closed form.
    pub fn closed_form_derivatives(&self, s: f64, x: f64) -> (f64, f64, f64) {
        let k = self.curvature;
        let q = 1.0 + k * (self.terminal_time - s);
        let v_tau = -k * k * x * x / (2.0 * q * q) + 0.5 * self.a * k / q;
        (-v_tau, k * x / q, k / q)
    }

    /// `−∂_sV − (a/2)∂_xxV + ½(∂_xV)²` of the closed form.
    pub fn pde_residual(&self, s: f64, x: f64) -> f64 {
        let (vs, vx, vxx) = self.closed_form_derivatives(s, x);
        -vs - 0.5 * self.a * vxx + 0.5 * vx * vx
    }

    /// `V*` by trapezoid quadrature of the Gaussian convolution (log-sum-exp).
    pub fn by_quadrature(&self, s: f64, x: f64) -> Result<f64> {
        let tau = self.terminal_time - s;
        let h = |y: f64| 0.5 * self.curvature * y * y;
        if tau <= 0.0 {
            return Ok(h(x));
        }
        let var = self.a * tau;
        let sd = var.sqrt();
        let n = 801;
        let half = 12.0 * sd;
        let dy = 2.0 * half / (n - 1) as f64;
        let exps: Vec<f64> = (0..n)
            .map(|i| {
                let y = -half + i as f64 * dy;
                -y * y / (2.0 * var) - h(x + y) / self.a
            })
            .collect();
        let top = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if top > 709.0 {
            return Err(Error::KernelOverflow { x, exponent: top });
        }
        let sum: f64 = exps.iter().map(|e| (e - top).exp()).sum::<f64>() * dy;
        let norm = (2.0 * std::f64::consts::PI * var).sqrt();
        Ok(-self.a * (top + (sum / norm).ln()))
    }
}

/// Cole–Hopf reference field on `mesh × grid`, by quadrature.
pub fn cole_hopf_solution(
    curvature: f64,
    a: f64,
    horizon: (f64, f64),
    grid: &Grid1D,
    mesh: &TimeMesh,
) -> Result<ScalarField> {
    let oracle = ColeHopfOracle::new(curvature, a, horizon.1)?;
    let xs = grid.nodes();
    let values = (0..mesh.n_nodes())
        .into_par_iter()
        .map(|n| {
            let s = mesh.time(n);
            xs.iter()
                .map(|&x| oracle.by_quadrature(s, x))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    ScalarField::new(*mesh, *grid, values)
}

// ---------------------------------------------------------------------------
// Monte-Carlo Feynman–Kac

/// Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

/// `E[φ(X_s)]` for `dX = D_pH(τ, X, DV(τ, X)) dτ + σ dw`, `X_t ~ m₀`, by
/// Euler paths on the mesh of `dv` up to node `s_index`.
pub fn brute_force_dual(
    model: &ModelSpec,
    dv: &VectorField,
    phi: &(dyn Fn(f64) -> f64 + Sync),
    m0: &GridDensity,
    s_index: usize,
    n_paths: usize,
    seed: u64,
) -> Result<Estimate> {
    if n_paths < 2 {
        return Err(Error::InvalidInput("need at least two paths".into()));
    }
    let mesh = dv.mesh();
    let grid = dv.grid();
    if s_index > mesh.n_steps() {
        return Err(Error::InvalidInput(format!(
            "s_index {s_index} beyond the mesh"
        )));
    }
    let l = model.local();
    let sigma = model.sigma();
    let dt = mesh.dt();
    let sqdt = dt.sqrt();
    let cdf = InverseCdf::new(m0);
    let samples: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, Purpose::FeynmanKac, i as u64);
            let mut x = cdf.sample(rng::uniform(&mut r));
            for n in 0..s_index {
                let s = mesh.time(n);
                let p = grid.interpolate(dv.slice(n), x);
                x += l.hamiltonian_dp(s, x, p) * dt + sigma * sqdt * rng::normal(&mut r);
            }
            phi(x)
        })
        .collect();
    Ok(mean_and_stderr(&samples))
}

pub fn mean_and_stderr(samples: &[f64]) -> Estimate {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    Estimate {
        value: mean,
        stderr: (var / n).sqrt(),
    }
}

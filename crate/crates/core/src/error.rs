use thiserror::Error;

/// Errors raised by the solvers, oracles and model plumbing.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("diffusion matrix is singular (smallest eigenvalue {min_eigenvalue:e})")]
    SingularSigma { min_eigenvalue: f64 },

    #[error("assumption check `{check}` failed at s={s}, x={x}, p={p}: {detail}")]
    AssumptionViolation {
        check: String,
        s: f64,
        x: f64,
        p: f64,
        detail: String,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("map produced a non-finite image at particle {index} (x={x})")]
    NonFiniteMap { index: usize, x: f64 },

    #[error("mesh mismatch: {0}")]
    MeshMismatch(String),

    #[error("tridiagonal solve broke down at row {row} (pivot {pivot:e})")]
    LinearSolveFailure { row: usize, pivot: f64 },

    #[error(
        "coefficient growth check failed for {what} at x={x}: |value|={value:e} > bound {bound:e}"
    )]
    GrowthViolation {
        what: String,
        x: f64,
        value: f64,
        bound: f64,
    },

    #[error("cumulative boundary mass {leak:e} exceeds {limit:e}")]
    MassLeak { leak: f64, limit: f64 },

    #[error("solution blew up at s={s}, x={x}: |V|={value:e} exceeds {threshold:e}")]
    BlowUp {
        s: f64,
        x: f64,
        value: f64,
        threshold: f64,
    },

    #[error("non-finite value at s={s}, x={x}")]
    NotFinite { s: f64, x: f64 },

    #[error("minimizer returned a non-finite value at s={s}, x={x}, p={p}")]
    MinimizerDomain { s: f64, x: f64, p: f64 },

    #[error("importance weights degenerate at node {node}: ESS {ess:.1} < {threshold:.1}")]
    WeightDegenerate {
        node: usize,
        ess: f64,
        threshold: f64,
    },

    #[error("bisection bracket [{lo}, {hi}] does not contain a sign change")]
    BracketFailure { lo: f64, hi: f64 },

    #[error("horizon {horizon} is not below the feasibility window {window}")]
    InfeasibleHorizon { horizon: f64, window: f64 },

    #[error("convolution integrand overflows at x={x} (exponent {exponent:e})")]
    KernelOverflow { x: f64, exponent: f64 },

    #[error("shooting failed to match the terminal condition (residual {residual:e})")]
    ShootingDivergence { residual: f64 },

    #[error("inner iteration did not converge; residuals {history:?}")]
    InnerNonConvergence { history: Vec<f64> },
}

impl Error {
    /// Stable upper-case name of the variant, for error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::SingularSigma { .. } => "SINGULAR_SIGMA",
            Error::AssumptionViolation { .. } => "ASSUMPTION_VIOLATION",
            Error::Unsupported(_) => "UNSUPPORTED",
            Error::InvalidInput(_) => "INVALID_INPUT",
            Error::NonFiniteMap { .. } => "NON_FINITE_MAP",
            Error::MeshMismatch(_) => "MESH_MISMATCH",
            Error::LinearSolveFailure { .. } => "LINEAR_SOLVE_FAILURE",
            Error::GrowthViolation { .. } => "GROWTH_VIOLATION",
            Error::MassLeak { .. } => "MASS_LEAK",
            Error::BlowUp { .. } => "BLOWUP",
            Error::NotFinite { .. } => "NOT_FINITE",
            Error::MinimizerDomain { .. } => "MINIMIZER_DOMAIN",
            Error::WeightDegenerate { .. } => "WEIGHT_DEGENERATE",
            Error::BracketFailure { .. } => "BRACKET_FAILURE",
            Error::InfeasibleHorizon { .. } => "INFEASIBLE_HORIZON",
            Error::KernelOverflow { .. } => "KERNEL_OVERFLOW",
            Error::ShootingDivergence { .. } => "SHOOTING_DIVERGENCE",
            Error::InnerNonConvergence { .. } => "INNER_NON_CONVERGENCE",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

//! Run configuration: TOML sections, dot-path overrides and validation.

use std::fmt;
use std::path::{Path, PathBuf};

use mftc_core::fixedpoint::FixedPointConfig;
use mftc_core::flow::{FlowMethod, MCParams};
use mftc_core::measure::GridDensity;
use mftc_core::model::{
    build_model, estimate_constants, AssumptionConstants, BuiltinFamily, ModelSpec,
    QuadraticControl, SquaredMean,
};
use mftc_core::pde::BoundaryPolicy;
use mftc_core::{Grid1D, TimeMesh};
use serde::{Deserialize, Serialize};

/// Bad config text, bad override or out-of-range value. Maps to exit 2.
#[derive(Debug)]
pub enum ConfigError {
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    Parse(String),
    MissingSection(&'static str),
    Override(String),
    Invalid(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Read { path, source } => {
                write!(f, "cannot read config {}: {source}", path.display())
            }
            ConfigError::Parse(msg) => write!(f, "config parse error: {msg}"),
            ConfigError::MissingSection(s) => write!(f, "config is missing the [{s}] section"),
            ConfigError::Override(msg) => write!(f, "bad --set override: {msg}"),
            ConfigError::Invalid(msg) => write!(f, "invalid config: {msg}"),
        }
    }
}

impl std::error::Error for ConfigError {}

type Result<T> = std::result::Result<T, ConfigError>;

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "LQ_MEANFIELD")]
    LqMeanField,
    #[serde(rename = "COLE_HOPF")]
    ColeHopf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Boundary {
    #[default]
    QuadraticExtrapolation,
    Neumann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Binary,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    #[default]
    FpGrid,
    ParticleSde,
    GirsanovReweight,
}

impl From<Method> for FlowMethod {
    fn from(m: Method) -> Self {
        match m {
            Method::FpGrid => FlowMethod::FpGrid,
            Method::ParticleSde => FlowMethod::ParticleSde,
            Method::GirsanovReweight => FlowMethod::GirsanovReweight,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub model: ModelSection,
    #[serde(default)]
    pub numerics: NumericsSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub family: Family,
    pub horizon: [f64; 2],
    #[serde(default = "one")]
    pub sigma: f64,
    /// Enables the global-in-time majorants; only honored for convex families.
    #[serde(default)]
    pub convex: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_coupling: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal_curvature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal_mean_coupling: Option<f64>,
    #[serde(default)]
    pub constants: ConstantsSection,
    #[serde(default)]
    pub initial: InitialSection,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstantsSection {
    pub c: f64,
    pub c_t: f64,
    pub delta: f64,
    pub lambda: f64,
    pub gamma: f64,
    /// Replace `c`, `c_t`, `delta` by sampled estimates.
    pub estimate: bool,
    pub audit_samples: usize,
}

impl Default for ConstantsSection {
    fn default() -> Self {
        let k = AssumptionConstants::default();
        Self {
            c: k.c,
            c_t: k.c_t,
            delta: k.delta,
            lambda: k.lambda,
            gamma: k.gamma,
            estimate: false,
            audit_samples: 2000,
        }
    }
}

/// Gaussian initial law.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialSection {
    pub mean: f64,
    pub std: f64,
}

impl Default for InitialSection {
    fn default() -> Self {
        Self {
            mean: 0.0,
            std: 1.0,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NumericsSection {
    pub bc: Boundary,
    pub grid: GridSection,
    pub mesh: MeshSection,
    pub fixed_point: FixedPointSection,
    pub mc: McSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub x_min: f64,
    pub x_max: f64,
    pub n_points: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            x_min: -8.0,
            x_max: 8.0,
            n_points: 401,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshSection {
    pub dt: f64,
}

impl Default for MeshSection {
    fn default() -> Self {
        Self { dt: 1e-3 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixedPointSection {
    pub max_iters: usize,
    pub tol_v: f64,
    pub tol_w2: f64,
    pub damping: f64,
    pub flow_method: Method,
}

impl Default for FixedPointSection {
    fn default() -> Self {
        let d = FixedPointConfig::default();
        Self {
            max_iters: d.max_iters,
            tol_v: d.tol_v,
            tol_w2: d.tol_w2,
            damping: d.damping,
            flow_method: Method::FpGrid,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McSection {
    pub n_particles: usize,
    pub substeps: usize,
    pub record_every: usize,
}

impl Default for McSection {
    fn default() -> Self {
        let d = MCParams::default();
        Self {
            n_particles: d.n_particles,
            substeps: d.substeps,
            record_every: d.record_every,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub format: Format,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs"),
            format: Format::Csv,
        }
    }
}

/// Sets `path` (dot-separated) in `root` to the TOML value `raw`; bare words
/// that are not valid TOML are taken as strings.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(format!("`{assignment}` is not KEY=VALUE")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(ConfigError::Override(format!("empty key in `{path}`")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = keys.split_last().expect("non-empty path");
    let mut table = root;
    for key in parents {
        let entry = table
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Override(format!("`{key}` in `{path}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parses `text`, applies the overrides and validates.
    pub fn from_text(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        if !table.contains_key("model") {
            return Err(ConfigError::MissingSection("model"));
        }
        let cfg: RunConfig = if overrides.is_empty() {
            // Parsing the text again keeps line numbers in the diagnostics.
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?
        } else {
            for o in overrides {
                apply_override(&mut table, o)?;
            }
            if !table.contains_key("model") {
                return Err(ConfigError::MissingSection("model"));
            }
            RunConfig::deserialize(toml::Value::Table(table))
                .map_err(|e| ConfigError::Parse(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_text(&text, overrides)
    }

    /// The effective configuration as TOML text.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let [t0, t1] = m.horizon;
        if !(t0.is_finite() && t1.is_finite() && t1 > t0) {
            return Err(invalid("model.horizon must be [t, T] with t < T"));
        }
        if !(m.sigma.is_finite() && m.sigma > 0.0) {
            return Err(invalid("model.sigma must be positive"));
        }
        if !(m.initial.std.is_finite() && m.initial.std > 0.0 && m.initial.mean.is_finite()) {
            return Err(invalid(
                "model.initial needs a finite mean and a positive std",
            ));
        }
        let lq_keys = [
            ("mean_coupling", m.mean_coupling),
            ("terminal_mean_coupling", m.terminal_mean_coupling),
        ];
        match m.family {
            Family::LqMeanField => {
                for (name, v) in lq_keys
                    .iter()
                    .chain([("terminal_curvature", m.terminal_curvature)].iter())
                {
                    if v.is_none() {
                        return Err(invalid(format!(
                            "model.{name} is required for LQ_MEANFIELD"
                        )));
                    }
                }
            }
            Family::ColeHopf => {
                if m.terminal_curvature.is_none() {
                    return Err(invalid(
                        "model.terminal_curvature is required for COLE_HOPF",
                    ));
                }
                for (name, v) in lq_keys {
                    if v.is_some() {
                        return Err(invalid(format!("model.{name} does not apply to COLE_HOPF")));
                    }
                }
            }
        }
        let g = &self.numerics.grid;
        if !(g.x_min < g.x_max) || g.n_points < 5 {
            return Err(invalid(
                "numerics.grid needs x_min < x_max and n_points >= 5",
            ));
        }
        let dt = self.numerics.mesh.dt;
        if !(dt > 0.0 && dt <= t1 - t0) {
            return Err(invalid("numerics.mesh.dt must be in (0, T - t]"));
        }
        self.fixed_point()
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        self.mc_params()
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        self.constants()
            .validate(1)
            .map_err(|e| invalid(e.to_string()))?;
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid1D> {
        let g = &self.numerics.grid;
        Grid1D::new(g.x_min, g.x_max, g.n_points).map_err(|e| invalid(e.to_string()))
    }

    pub fn mesh(&self) -> Result<TimeMesh> {
        let [t0, t1] = self.model.horizon;
        TimeMesh::with_step(t0, t1, self.numerics.mesh.dt).map_err(|e| invalid(e.to_string()))
    }

    pub fn initial(&self, grid: Grid1D) -> Result<GridDensity> {
        let i = &self.model.initial;
        GridDensity::gaussian(grid, i.mean, i.std).map_err(|e| invalid(e.to_string()))
    }

    pub fn bc(&self) -> BoundaryPolicy {
        match self.numerics.bc {
            Boundary::QuadraticExtrapolation => BoundaryPolicy::QuadraticExtrapolation,
            Boundary::Neumann => BoundaryPolicy::Neumann,
        }
    }

    pub fn mc_params(&self) -> MCParams {
        let mc = &self.numerics.mc;
        MCParams {
            n_particles: mc.n_particles,
            seed: self.seed,
            substeps: mc.substeps,
            record_every: mc.record_every,
        }
    }

    pub fn fixed_point(&self) -> FixedPointConfig {
        let fp = &self.numerics.fixed_point;
        FixedPointConfig {
            max_iters: fp.max_iters,
            tol_v: fp.tol_v,
            tol_w2: fp.tol_w2,
            damping: fp.damping,
            flow_method: fp.flow_method.into(),
            mc: self.mc_params(),
            bc: self.bc(),
        }
    }

    pub fn constants(&self) -> AssumptionConstants {
        let k = &self.model.constants;
        AssumptionConstants {
            c: k.c,
            c_t: k.c_t,
            delta: k.delta,
            lambda: k.lambda,
            gamma: k.gamma,
        }
    }

    /// Builds the model; families built without the convexity flag do not
    /// get global-in-time majorants.
    pub fn model(&self) -> Result<ModelSpec> {
        let m = &self.model;
        let horizon = (m.horizon[0], m.horizon[1]);
        let curvature = m.terminal_curvature.unwrap_or(0.0);
        let family = match (m.family, m.convex) {
            (Family::LqMeanField, true) => BuiltinFamily::LqMeanField {
                mean_coupling: m.mean_coupling.unwrap_or(0.0),
                terminal_curvature: curvature,
                terminal_mean_coupling: m.terminal_mean_coupling.unwrap_or(0.0),
            },
            (Family::ColeHopf, true) => BuiltinFamily::ColeHopf {
                terminal_curvature: curvature,
            },
            (family, false) => {
                let (running, terminal) = match family {
                    Family::LqMeanField => (
                        m.mean_coupling.unwrap_or(0.0),
                        m.terminal_mean_coupling.unwrap_or(0.0),
                    ),
                    Family::ColeHopf => (0.0, 0.0),
                };
                if curvature < 0.0 || running < 0.0 || terminal < 0.0 {
                    return Err(invalid("model coefficients must be non-negative"));
                }
                BuiltinFamily::Custom {
                    local: std::sync::Arc::new(QuadraticControl {
                        terminal_curvature: curvature,
                    }),
                    running: std::sync::Arc::new(SquaredMean { weight: running }),
                    terminal: std::sync::Arc::new(SquaredMean { weight: terminal }),
                    convex: false,
                }
            }
        };
        let model = build_model(family, horizon, &[m.sigma], self.constants())
            .map_err(|e| invalid(e.to_string()))?;
        if m.constants.estimate {
            let k = estimate_constants(&model, m.constants.audit_samples, self.constants());
            return model.with_constants(k).map_err(|e| invalid(e.to_string()));
        }
        Ok(model)
    }
}

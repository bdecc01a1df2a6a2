//! Versioned JSON run configuration and the builtin scenario catalog.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use fracfp_core::coefficients::{self, CoefficientSet, DriftSpec, ScalarFunctionSpec};
use fracfp_core::particles::CouplingMode;
use fracfp_core::resolvent::ResolventControls;
use fracfp_core::spectral::{Field, Grid};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config does not match the schema: {0}")]
    Schema(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("unknown builtin scenario '{0}'")]
    UnknownBuiltin(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dim: usize,
    pub n: usize,
    pub half_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalarConfig {
    Linear { slope: f64 },
    PorousMedium { m: f64 },
    Constant { value: f64 },
    Logistic { k: f64 },
    InverseQuadratic,
    /// C¹ affine continuation of `inner` outside `[−level, level]`.
    Truncated { inner: Box<ScalarConfig>, level: f64 },
}

impl ScalarConfig {
    pub fn build(&self) -> Result<ScalarFunctionSpec, ConfigError> {
        Ok(match self {
            ScalarConfig::Linear { slope } => coefficients::linear(*slope),
            ScalarConfig::PorousMedium { m } => {
                if !(*m >= 1.0) {
                    return invalid(format!("porous medium exponent {m} must be >= 1"));
                }
                coefficients::porous_medium(*m)
            }
            ScalarConfig::Constant { value } => coefficients::constant(*value),
            ScalarConfig::Logistic { k } => coefficients::logistic_b(*k),
            ScalarConfig::InverseQuadratic => coefficients::inverse_quadratic(),
            ScalarConfig::Truncated { inner, level } => {
                coefficients::truncate(&inner.build()?, *level).map_err(|e| ConfigError::Invalid(e.to_string()))?
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftConfig {
    Zero,
    Constant { vector: Vec<f64> },
    /// `D_a(x) = amplitude · sin(kappa · x_a)`.
    Sine { amplitude: f64, kappa: f64 },
    Rotational { amplitude: f64, kappa: f64 },
}

impl DriftConfig {
    pub fn build(&self, dim: usize) -> Result<DriftSpec, ConfigError> {
        Ok(match self {
            DriftConfig::Zero => coefficients::zero_drift(dim),
            DriftConfig::Constant { vector } => {
                if vector.len() != dim {
                    return invalid(format!("drift vector has {} components, grid has {dim}", vector.len()));
                }
                coefficients::constant_d(vector)
            }
            DriftConfig::Sine { amplitude, kappa } => coefficients::sine_d(dim, *amplitude, *kappa),
            DriftConfig::Rotational { amplitude, kappa } => {
                coefficients::rotational_d(dim, *amplitude, *kappa).map_err(|e| ConfigError::Invalid(e.to_string()))?
            }
        })
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, DriftConfig::Zero)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientConfig {
    pub s: f64,
    pub beta: ScalarConfig,
    pub b: ScalarConfig,
    pub drift: DriftConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianComponent {
    pub center: Vec<f64>,
    pub width: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialConfig {
    /// Sum of Gaussians `weight · exp(−|x − center|²/(2 width²))`, rescaled to `mass` when given.
    Gaussians {
        components: Vec<GaussianComponent>,
        #[serde(default)]
        mass: Option<f64>,
    },
    /// A field written by a previous run (`.csv` or `.bin`).
    File { path: PathBuf },
}

impl InitialConfig {
    pub fn build(&self, grid: Grid) -> Result<Field, ConfigError> {
        match self {
            InitialConfig::Gaussians { components, mass } => {
                if components.is_empty() {
                    return invalid("initial datum needs at least one component");
                }
                for c in components {
                    if c.center.len() != grid.dim || !(c.width > 0.0) {
                        return invalid("each component needs a center of grid dimension and a positive width");
                    }
                }
                let f = Field::from_fn(grid, |x| {
                    components
                        .iter()
                        .map(|c| {
                            let r2: f64 = c.center.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum();
                            c.weight * (-r2 / (2.0 * c.width * c.width)).exp()
                        })
                        .sum()
                })
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
                match mass {
                    Some(m) => {
                        let cur = f.mass();
                        if cur == 0.0 {
                            return invalid("initial datum has zero mass and cannot be rescaled");
                        }
                        Ok(f.scaled(m / cur))
                    }
                    None => Ok(f),
                }
            }
            InitialConfig::File { path } => {
                let f = if path.extension().is_some_and(|e| e == "bin") {
                    fracfp_core::io::read_field_bin(path)
                } else {
                    fracfp_core::io::read_field_csv(path)
                }
                .map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))?;
                if f.grid() != &grid {
                    return invalid(format!("{} is not on the configured grid", path.display()));
                }
                Ok(f)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolventStage {
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolutionStage {
    pub t_final: f64,
    pub h: f64,
    #[serde(default = "one")]
    pub snapshot_stride: usize,
    /// Compare with the spectral flow `e^{−t|ξ|^{2s}}` (needs `β(r) = r` and no drift).
    #[serde(default)]
    pub compare_exact: bool,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaugeStage {
    pub run_a: PathBuf,
    pub run_b: PathBuf,
    pub eps_g: f64,
    pub tol: f64,
    /// Mollifier width; defaults to `2·dx`.
    #[serde(default)]
    pub eps_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelStage {
    pub orders: Vec<f64>,
    pub eps: Vec<f64>,
    pub dims: Vec<usize>,
    pub radii: Vec<f64>,
    /// Also evaluate `ε ∫ g^s_ε = 1` for each combination (seconds per entry).
    #[serde(default)]
    pub mass_identity: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeStage {
    pub n_particles: usize,
    pub dt: f64,
    pub t_final: f64,
    pub mode: CouplingMode,
    #[serde(default = "one")]
    pub snapshot_stride: usize,
    #[serde(default)]
    pub big_jump_cap: Option<f64>,
    #[serde(default = "default_l1_tol")]
    pub l1_tol: f64,
}

fn default_l1_tol() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub scenario: String,
    pub grid: GridConfig,
    pub coefficients: CoefficientConfig,
    #[serde(default)]
    pub initial: Option<InitialConfig>,
    #[serde(default)]
    pub solver: ResolventControls,
    #[serde(default)]
    pub resolvent: Option<ResolventStage>,
    #[serde(default)]
    pub evolution: Option<EvolutionStage>,
    #[serde(default)]
    pub gauge: Option<GaugeStage>,
    #[serde(default)]
    pub kernel: Option<KernelStage>,
    #[serde(default)]
    pub sde: Option<SdeStage>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn positive(name: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        invalid(format!("{name} = {v} must be positive and finite"))
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| ConfigError::Schema(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// `builtin:<name>` selects a catalog scenario; anything else is a JSON file path.
    pub fn load(spec: &str) -> Result<Self, ConfigError> {
        if let Some(name) = spec.strip_prefix("builtin:") {
            let cfg = builtin(name)?;
            cfg.validate()?;
            return Ok(cfg);
        }
        let path = Path::new(spec);
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return invalid(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version));
        }
        if self.scenario.trim().is_empty() {
            return invalid("scenario name is empty");
        }
        self.grid()?;
        self.coefficient_set()?;
        let c = &self.solver;
        positive("solver.tol_l1", c.tol_l1)?;
        positive("solver.gmres_rtol", c.gmres_rtol)?;
        positive("solver.damping", c.damping)?;
        positive("solver.chain_fraction", c.chain_fraction)?;
        positive("solver.degenerate_eps_floor", c.degenerate_eps_floor)?;
        if c.eps_schedule.is_empty() {
            return invalid("solver.eps_schedule is empty");
        }
        for &e in &c.eps_schedule {
            positive("solver.eps_schedule entry", e)?;
        }
        if c.max_iter == 0 || c.gmres_restart == 0 || c.gmres_max_iter == 0 {
            return invalid("solver iteration limits must be positive");
        }
        if let Some(r) = &self.resolvent {
            positive("resolvent.lambda", r.lambda)?;
        }
        if let Some(e) = &self.evolution {
            positive("evolution.t_final", e.t_final)?;
            positive("evolution.h", e.h)?;
            if e.h > e.t_final {
                return invalid("evolution.h exceeds evolution.t_final");
            }
            if e.snapshot_stride == 0 {
                return invalid("evolution.snapshot_stride must be positive");
            }
            if e.compare_exact && !self.is_pure_linear() {
                return invalid("compare_exact needs beta = linear(1) and zero drift");
            }
        }
        if let Some(g) = &self.gauge {
            positive("gauge.eps_g", g.eps_g)?;
            positive("gauge.tol", g.tol)?;
            if let Some(m) = g.eps_m {
                positive("gauge.eps_m", m)?;
            }
        }
        if let Some(k) = &self.kernel {
            if k.orders.is_empty() || k.eps.is_empty() || k.dims.is_empty() || k.radii.is_empty() {
                return invalid("kernel lists must be non-empty");
            }
            for &s in &k.orders {
                if !(s > 0.0 && s < 1.0) {
                    return invalid(format!("kernel order {s} must lie in (0, 1)"));
                }
            }
            for &e in &k.eps {
                positive("kernel.eps entry", e)?;
            }
            for &r in &k.radii {
                positive("kernel.radii entry", r)?;
            }
            if k.dims.iter().any(|d| !(1..=3).contains(d)) {
                return invalid("kernel dims must be 1, 2 or 3");
            }
        }
        if let Some(sde) = &self.sde {
            positive("sde.dt", sde.dt)?;
            positive("sde.t_final", sde.t_final)?;
            positive("sde.l1_tol", sde.l1_tol)?;
            if sde.n_particles == 0 || sde.snapshot_stride == 0 {
                return invalid("sde.n_particles and sde.snapshot_stride must be positive");
            }
            if !(self.coefficients.s > 0.5 && self.coefficients.s < 1.0) {
                return invalid("the particle simulator needs s in (1/2, 1)");
            }
            if self.initial.is_none() {
                return invalid("sde stage needs an initial datum");
            }
        }
        if self.evolution.is_some() && self.initial.is_none() {
            return invalid("evolution stage needs an initial datum");
        }
        if self.resolvent.is_some() && self.initial.is_none() {
            return invalid("resolvent stage needs an initial datum");
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid, ConfigError> {
        Grid::new(self.grid.dim, self.grid.n, self.grid.half_width).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn coefficient_set(&self) -> Result<CoefficientSet, ConfigError> {
        let c = &self.coefficients;
        CoefficientSet::new(c.beta.build()?, c.b.build()?, c.drift.build(self.grid.dim)?, c.s)
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn initial_field(&self) -> Result<Field, ConfigError> {
        match &self.initial {
            Some(i) => i.build(self.grid()?),
            None => invalid("no initial datum configured"),
        }
    }

    fn is_pure_linear(&self) -> bool {
        self.coefficients.beta == ScalarConfig::Linear { slope: 1.0 } && self.coefficients.drift.is_zero()
    }
}

fn gaussian_1d(center: f64, width: f64, mass: f64) -> InitialConfig {
    InitialConfig::Gaussians {
        components: vec![GaussianComponent { center: vec![center], width, weight: 1.0 }],
        mass: Some(mass),
    }
}

fn porous_truncated() -> ScalarConfig {
    ScalarConfig::Truncated { inner: Box::new(ScalarConfig::PorousMedium { m: 2.0 }), level: 2.0 }
}

fn base(scenario: &str, n: usize, coefficients: CoefficientConfig) -> RunConfig {
    RunConfig {
        schema_version: SCHEMA_VERSION,
        scenario: scenario.into(),
        grid: GridConfig { dim: 1, n, half_width: 8.0 },
        coefficients,
        initial: None,
        solver: ResolventControls::default(),
        resolvent: None,
        evolution: None,
        gauge: None,
        kernel: None,
        sde: None,
        seed: 0,
        output_dir: None,
    }
}

fn linear_coefficients() -> CoefficientConfig {
    CoefficientConfig { s: 0.75, beta: ScalarConfig::Linear { slope: 1.0 }, b: ScalarConfig::Constant { value: 1.0 }, drift: DriftConfig::Zero }
}

fn porous_drift_coefficients() -> CoefficientConfig {
    CoefficientConfig {
        s: 0.75,
        beta: porous_truncated(),
        b: ScalarConfig::InverseQuadratic,
        drift: DriftConfig::Sine { amplitude: 0.2, kappa: PI / 8.0 },
    }
}

pub const BUILTINS: &[&str] = &[
    "linear_heat_d1",
    "porous_drift_d1",
    "resolvent_porous_d1",
    "kernel_table",
    "sde_linear_d1",
    "sde_porous_d1",
];

pub fn builtin(name: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = match name {
        "linear_heat_d1" => {
            let mut c = base(name, 256, linear_coefficients());
            c.initial = Some(gaussian_1d(0.0, 0.5, 1.0));
            c.evolution = Some(EvolutionStage { t_final: 0.5, h: 1e-3, snapshot_stride: 50, compare_exact: true });
            c
        }
        "porous_drift_d1" => {
            let mut c = base(name, 128, porous_drift_coefficients());
            c.initial = Some(gaussian_1d(0.0, 0.5, 1.0));
            c.evolution = Some(EvolutionStage { t_final: 0.2, h: 2e-3, snapshot_stride: 10, compare_exact: false });
            c
        }
        "resolvent_porous_d1" => {
            let mut c = base(name, 256, porous_drift_coefficients());
            c.initial = Some(InitialConfig::Gaussians {
                components: vec![
                    GaussianComponent { center: vec![-2.0], width: 0.6, weight: 0.8 },
                    GaussianComponent { center: vec![0.5], width: 0.9, weight: 0.5 },
                    GaussianComponent { center: vec![3.0], width: 0.5, weight: 0.3 },
                ],
                mass: None,
            });
            c.resolvent = Some(ResolventStage { lambda: 0.5 });
            c
        }
        "kernel_table" => {
            let mut c = base(name, 64, linear_coefficients());
            c.kernel = Some(KernelStage {
                orders: vec![0.6, 0.75],
                eps: vec![1.0],
                dims: vec![1, 2],
                radii: (1..=40).map(|i| 0.1 * i as f64).collect(),
                mass_identity: false,
            });
            c
        }
        "sde_linear_d1" | "sde_porous_d1" => {
            let coefficients = if name == "sde_linear_d1" {
                linear_coefficients()
            } else {
                porous_drift_coefficients()
            };
            let mut c = base(name, 128, coefficients);
            c.initial = Some(gaussian_1d(0.0, 0.5, 1.0));
            c.solver.eps_schedule = vec![1e-3];
            c.sde = Some(SdeStage {
                n_particles: 100_000,
                dt: 2e-3,
                t_final: 0.5,
                mode: CouplingMode::Decoupled,
                snapshot_stride: 50,
                big_jump_cap: None,
                l1_tol: if name == "sde_linear_d1" { 0.05 } else { 0.08 },
            });
            c.seed = 1;
            c
        }
        other => return Err(ConfigError::UnknownBuiltin(other.into())),
    };
    cfg.scenario = name.into();
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_validate_and_round_trip() {
        for name in BUILTINS {
            let cfg = builtin(name).unwrap();
            cfg.validate().unwrap();
            let text = serde_json::to_string_pretty(&cfg).unwrap();
            assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
        }
    }

    #[test]
    fn unknown_fields_are_schema_errors() {
        let mut v = serde_json::to_value(builtin("linear_heat_d1").unwrap()).unwrap();
        v["grid"]["spacing"] = serde_json::json!(0.1);
        assert!(matches!(RunConfig::from_json(&v.to_string()), Err(ConfigError::Schema(_))));
    }

    #[test]
    fn semantic_violations_are_rejected() {
        let mut cfg = builtin("linear_heat_d1").unwrap();
        cfg.solver.tol_l1 = 0.0;
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));
        let mut cfg = builtin("linear_heat_d1").unwrap();
        cfg.schema_version = 99;
        assert!(cfg.validate().is_err());
        let mut cfg = builtin("porous_drift_d1").unwrap();
        cfg.evolution.as_mut().unwrap().compare_exact = true;
        assert!(cfg.validate().is_err());
        let mut cfg = builtin("linear_heat_d1").unwrap();
        cfg.grid.n = 100;
        assert!(cfg.validate().is_err());
        assert!(matches!(builtin("nope"), Err(ConfigError::UnknownBuiltin(_))));
    }

    #[test]
    fn gaussian_initial_mass_is_normalized() {
        let cfg = builtin("linear_heat_d1").unwrap();
        let u0 = cfg.initial_field().unwrap();
        assert!((u0.mass() - 1.0).abs() < 1e-14);
    }
}

//! Stage runners shared by the CLI subcommands and `run_scenario`.

use std::path::{Path, PathBuf};

use fracfp_core::coefficients::CoefficientSet;
use fracfp_core::evolution::{self, EvolutionConfig, SolutionPath, TestFunction, TraceRow};
use fracfp_core::gauge::{self, GaugePair};
use fracfp_core::kernel::{self, KernelQuery};
use fracfp_core::particles::{self, LevyConfig};
use fracfp_core::resolvent;
use fracfp_core::spectral::Field;
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::manifest::{RunManifest, RunOutput, RunStatus, SnapshotEntry};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("field i/o: {0}")]
    FieldIo(#[from] fracfp_core::io::IoError),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            _ => 3,
        }
    }
}

pub fn exit_code(status: RunStatus) -> i32 {
    match status {
        RunStatus::Ok => 0,
        RunStatus::NumericalFailure => 3,
        RunStatus::AcceptanceFailure => 4,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Resolvent,
    Evolve,
    Gauge,
    Kernel,
    Sde,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Resolvent => "resolvent",
            Stage::Evolve => "evolve",
            Stage::Gauge => "gauge",
            Stage::Kernel => "kernel",
            Stage::Sde => "sde",
        }
    }

    fn configured(self, cfg: &RunConfig) -> bool {
        match self {
            Stage::Resolvent => cfg.resolvent.is_some(),
            Stage::Evolve => cfg.evolution.is_some(),
            Stage::Gauge => cfg.gauge.is_some(),
            Stage::Kernel => cfg.kernel.is_some(),
            Stage::Sde => cfg.sde.is_some(),
        }
    }
}

/// `--out`, else the config's `output_dir`, else `runs/<scenario>`.
pub fn output_dir(cfg: &RunConfig, out: Option<&Path>) -> PathBuf {
    out.map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.scenario))
}

/// Runs the configured stages in pipeline order into one directory.
pub fn run_scenario(cfg: &RunConfig, out: &Path) -> Result<RunManifest, RunError> {
    let stages: Vec<Stage> = [Stage::Resolvent, Stage::Evolve, Stage::Gauge, Stage::Kernel, Stage::Sde]
        .into_iter()
        .filter(|s| s.configured(cfg))
        .collect();
    run_stages(cfg, &stages, out, "scenario")
}

/// Validates, then runs `stages`; numerical failures are recorded in the manifest, not returned.
pub fn run_stages(cfg: &RunConfig, stages: &[Stage], out: &Path, command: &str) -> Result<RunManifest, RunError> {
    cfg.validate()?;
    for s in stages {
        if !s.configured(cfg) {
            return Err(ConfigError::Invalid(format!("config has no '{}' block", s.name())).into());
        }
    }
    let cs = cfg.coefficient_set()?;
    let mut o = RunOutput::create(out, command, cfg)?;
    let mut report = Map::new();
    for &stage in stages {
        o.begin_stage(stage.name());
        let result = match stage {
            Stage::Resolvent => resolvent_stage(cfg, &cs, &mut o),
            Stage::Evolve => evolve_stage(cfg, &cs, &mut o),
            Stage::Gauge => gauge_stage(cfg, &cs, &mut o),
            Stage::Kernel => kernel_stage(cfg, &mut o),
            Stage::Sde => sde_stage(cfg, &cs, &mut o),
        };
        match result {
            Ok(v) => {
                report.insert(stage.name().into(), v);
            }
            Err(StageFailure::Numerical(msg, partial)) => {
                o.manifest.errors.push(format!("{}: {msg}", stage.name()));
                o.manifest.status = RunStatus::NumericalFailure;
                report.insert(stage.name().into(), partial);
                break;
            }
            Err(StageFailure::Run(e)) => return Err(e),
        }
    }
    o.end_stage();
    if o.manifest.status == RunStatus::Ok && !o.manifest.all_invariants_passed() {
        o.manifest.status = RunStatus::NumericalFailure;
    }
    o.write_json("report.json", &Value::Object(report))?;
    Ok(o.finish()?)
}

enum StageFailure {
    Numerical(String, Value),
    Run(RunError),
}

impl<E: Into<RunError>> From<E> for StageFailure {
    fn from(e: E) -> Self {
        StageFailure::Run(e.into())
    }
}

fn numerical(msg: impl ToString) -> StageFailure {
    StageFailure::Numerical(msg.to_string(), Value::Null)
}

fn resolvent_stage(cfg: &RunConfig, cs: &CoefficientSet, o: &mut RunOutput) -> Result<Value, StageFailure> {
    let lambda = cfg.resolvent.as_ref().expect("configured").lambda;
    let f = cfg.initial_field()?;
    o.write_field("f", &f)?;
    let j = resolvent::resolvent_j(&f, lambda, cs, &cfg.solver).map_err(numerical)?;
    o.write_field("y", &j.y)?;
    o.manifest.warnings.extend(j.warnings.iter().cloned());
    let mass_defect = (j.y.mass() - f.mass()).abs() / f.l1().max(f64::MIN_POSITIVE);
    o.invariant("resolvent_mass_identity", mass_defect, 1e-9, mass_defect <= 1e-9);
    if f.min() >= 0.0 {
        o.invariant("resolvent_positivity", j.y.min(), -1e-8, j.y.min() >= -1e-8);
    }
    let probes: Vec<Vec<f64>> = (0..f.grid().len()).map(|i| f.grid().point(i)[..f.grid().dim].to_vec()).collect();
    let bound = (1.0 + cs.drift.m_constant(&probes).sqrt()) * f.linf();
    o.invariant("resolvent_sup_bound", j.y.linf(), bound, j.y.linf() <= bound * (1.0 + 1e-9));
    let stages: Vec<Value> = j
        .stages
        .iter()
        .map(|s| {
            json!({
                "eps": s.eps,
                "iterations": s.iterations,
                "residual_l1": s.residual_l1,
                "residual_precond_l2": s.residual_precond_l2,
                "gmres_iterations": s.gmres_iterations,
                "chain": s.chain,
            })
        })
        .collect();
    Ok(json!({
        "lambda": lambda,
        "mass_in": f.mass(),
        "mass_out": j.y.mass(),
        "min_out": j.y.min(),
        "linf_out": j.y.linf(),
        "stages": stages,
        "stage_increments": j.stage_increments,
        "warnings": j.warnings,
    }))
}

fn trace_rows(path: &SolutionPath) -> Vec<Vec<f64>> {
    path.traces
        .iter()
        .map(|r| vec![r.step as f64, r.t, r.mass, r.min, r.linf, r.residual, if r.sup_bound_ok { 1.0 } else { 0.0 }])
        .collect()
}

fn write_snapshots(o: &mut RunOutput, path: &SolutionPath, prefix: &str) -> Result<(), StageFailure> {
    for (k, (t, f)) in path.times.iter().zip(&path.fields).enumerate() {
        let step = (t / path.h).round() as usize;
        let (csv, bin) = o.write_field(&format!("{prefix}{step:05}"), f)?;
        if prefix == "u_" {
            o.manifest.snapshots.push(SnapshotEntry { index: k, t: *t, csv, bin });
        }
    }
    Ok(())
}

fn evolution_invariants(o: &mut RunOutput, path: &SolutionPath, label: &str) {
    let drift = path.max_relative_mass_drift();
    o.invariant(&format!("{label}_mass_drift"), drift, 1e-8, drift <= 1e-8);
    if path.fields[0].min() >= 0.0 {
        let m = path.min_over_time();
        o.invariant(&format!("{label}_min"), m, -1e-8, m >= -1e-8);
    }
}

fn evolve_stage(cfg: &RunConfig, cs: &CoefficientSet, o: &mut RunOutput) -> Result<Value, StageFailure> {
    let e = cfg.evolution.as_ref().expect("configured");
    let u0 = cfg.initial_field()?;
    let ec = EvolutionConfig { t_final: e.t_final, h: e.h, cs: cs.clone(), controls: cfg.solver.clone(), snapshot_stride: e.snapshot_stride };
    let path = evolution::evolve(&u0, &ec).map_err(numerical)?;
    o.manifest.h = Some(e.h);
    o.manifest.warnings.extend(path.warnings.iter().cloned());
    o.write_table("traces.csv", &["step", "t", "mass", "min", "linf", "residual", "sup_bound_ok"], &trace_rows(&path))?;
    write_snapshots(o, &path, "u_")?;
    evolution_invariants(o, &path, "evolution");
    let mut report = json!({
        "h": e.h,
        "t_final": path.final_time(),
        "steps": path.traces.len() - 1,
        "max_relative_mass_drift": path.max_relative_mass_drift(),
        "min_over_time": path.min_over_time(),
        "warnings": path.warnings,
    });
    if e.snapshot_stride == 1 {
        let residuals: Vec<f64> = TestFunction::catalog(path.final_time(), u0.grid().dim)
            .iter()
            .map(|phi| evolution::distributional_residual(&path, phi, cs))
            .collect();
        report["distributional_residuals"] = json!(residuals);
    }
    if e.compare_exact {
        let errs: Vec<Value> = path
            .times
            .iter()
            .zip(&path.fields)
            .map(|(t, f)| json!({"t": t, "l1_error": f.l1_distance(&evolution::linear_exact_flow(&u0, *t, cs.s))}))
            .collect();
        report["exact_comparison"] = json!(errs);
    }
    if let Some(msg) = &path.failure {
        return Err(StageFailure::Numerical(msg.clone(), report));
    }
    Ok(report)
}

/// Rebuilds a solution path from a run directory's manifest and binary snapshots.
pub fn load_run(dir: &Path) -> Result<SolutionPath, RunError> {
    let m = RunManifest::read(dir)?;
    if m.snapshots.is_empty() {
        return Err(ConfigError::Invalid(format!("{} holds no evolution snapshots", dir.display())).into());
    }
    let h = m.h.ok_or_else(|| ConfigError::Invalid(format!("{} records no step size", dir.display())))?;
    let mut times = Vec::new();
    let mut fields = Vec::new();
    let mut traces = Vec::new();
    for s in &m.snapshots {
        let f: Field = fracfp_core::io::read_field_bin(&dir.join(&s.bin))?;
        traces.push(TraceRow {
            step: (s.t / h).round() as usize,
            t: s.t,
            mass: f.mass(),
            min: f.min(),
            linf: f.linf(),
            residual: 0.0,
            sup_bound_ok: true,
        });
        times.push(s.t);
        fields.push(f);
    }
    Ok(SolutionPath { times, fields, h, traces, warnings: Vec::new(), failure: None })
}

fn gauge_stage(cfg: &RunConfig, cs: &CoefficientSet, o: &mut RunOutput) -> Result<Value, StageFailure> {
    let g = cfg.gauge.as_ref().expect("configured");
    let a = load_run(&g.run_a)?;
    let b = load_run(&g.run_b)?;
    let mut pair = GaugePair::new(&a, &b, g.eps_g, cs).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    if let Some(m) = g.eps_m {
        pair = pair.with_mollifier(m).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    }
    let rep = gauge::gronwall_audit(&pair, g.tol).map_err(numerical)?;
    let rows: Vec<Vec<f64>> = (0..rep.times.len())
        .map(|k| vec![rep.times[k], rep.h_trace[k], rep.h_spectral_trace[k], rep.eps_l2_trace[k], rep.hs_trace[k], rep.eta_proxy[k]])
        .collect();
    o.write_table("traces.csv", &["t", "h", "h_spectral", "eps_l2", "hs_energy", "eta_proxy"], &rows)?;
    let hmin = rep.h_trace.iter().cloned().fold(f64::INFINITY, f64::min);
    o.invariant("gauge_nonnegative", hmin, 0.0, hmin >= 0.0);
    o.invariant("gauge_route_agreement", rep.route_defect, 1e-10, rep.route_defect <= 1e-10);
    Ok(serde_json::to_value(&rep).expect("serializable"))
}

fn kernel_stage(cfg: &RunConfig, o: &mut RunOutput) -> Result<Value, StageFailure> {
    let k = cfg.kernel.as_ref().expect("configured");
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    let mut masses = Vec::new();
    for &s in &k.orders {
        for &eps in &k.eps {
            for &d in &k.dims {
                for &r in &k.radii {
                    let q = KernelQuery { s, eps, d, r };
                    q.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
                    let a = kernel::resolvent_kernel_subordination(&q).map_err(numerical)?;
                    let b = kernel::resolvent_kernel_fourier(&q).map_err(numerical)?;
                    let rel = (a - b).abs() / a.abs().max(b.abs());
                    worst = worst.max(rel);
                    rows.push(vec![s, eps, d as f64, r, a, b, rel]);
                }
                if k.mass_identity {
                    let m = kernel::mass_identity(s, eps, d).map_err(numerical)?;
                    masses.push(json!({"s": s, "eps": eps, "d": d, "eps_times_integral": m}));
                    o.invariant(&format!("kernel_mass_s{s}_eps{eps}_d{d}"), (m - 1.0).abs(), 1e-6, (m - 1.0).abs() <= 1e-6);
                }
            }
        }
    }
    o.write_table("kernel.csv", &["s", "eps", "d", "r", "g_subordination", "g_fourier", "rel_diff"], &rows)?;
    o.invariant("kernel_route_agreement", worst, 1e-4, worst <= 1e-4);
    Ok(json!({
        "quadrature": {
            "abs_tol": kernel::kernel_settings().abs_tol,
            "rel_tol": kernel::kernel_settings().rel_tol,
            "max_evals": kernel::kernel_settings().max_evals,
        },
        "max_route_rel_diff": worst,
        "mass_identity": masses,
    }))
}

const POSITION_ROW_CAP: usize = 10_000;

fn sde_stage(cfg: &RunConfig, cs: &CoefficientSet, o: &mut RunOutput) -> Result<Value, StageFailure> {
    let sde = cfg.sde.as_ref().expect("configured");
    let mut u0 = cfg.initial_field()?;
    let mass = u0.mass();
    if !(mass > 0.0) {
        return Err(ConfigError::Invalid("initial datum must have positive mass".into()).into());
    }
    if (mass - 1.0).abs() > 1e-12 {
        o.manifest.warnings.push(format!("initial datum rescaled from mass {mass} to a probability density"));
        u0 = u0.scaled(1.0 / mass);
    }
    let ec = EvolutionConfig { t_final: sde.t_final, h: sde.dt, cs: cs.clone(), controls: cfg.solver.clone(), snapshot_stride: 1 };
    let pde = evolution::evolve(&u0, &ec).map_err(numerical)?;
    evolution_invariants(o, &pde, "sde_pde");
    if let Some(msg) = &pde.failure {
        return Err(StageFailure::Numerical(msg.clone(), Value::Null));
    }
    let lc = LevyConfig { s: cs.s, dt: sde.dt, big_jump_cap: sde.big_jump_cap, seed: cfg.seed, n_particles: sde.n_particles };
    let ens = particles::simulate(&u0, &lc, cs, sde.mode, Some(&pde), sde.t_final, sde.snapshot_stride).map_err(numerical)?;
    let rep = particles::superposition_check(&ens, &pde, sde.l1_tol).map_err(numerical)?;
    let thinning = sde.n_particles.div_ceil(POSITION_ROW_CAP);
    let grid = ens.grid;
    let mut kde_masses = Vec::new();
    for snap in &ens.snapshots {
        let rows: Vec<Vec<f64>> = (0..snap.len()).step_by(thinning).map(|i| snap.particle(i).to_vec()).collect();
        let header: Vec<String> = (0..grid.dim).map(|a| format!("x{a}")).collect();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        o.write_table(&format!("samples/positions_{:05}.csv", snap.step), &header, &rows)?;
        let kde = particles::estimate_density(snap, &grid, None).map_err(numerical)?;
        kde_masses.push(kde.values.mass());
        o.write_field(&format!("kde_{:05}", snap.step), &kde.values)?;
    }
    let worst_mass = kde_masses.iter().map(|m| (m - 1.0).abs()).fold(0.0, f64::max);
    o.invariant("kde_unit_mass", worst_mass, 1e-10, worst_mass <= 1e-10);
    o.invariant("superposition_l1", rep.max_l1(), sde.l1_tol, rep.passed);
    Ok(json!({
        "mode": sde.mode,
        "n_particles": sde.n_particles,
        "seed": cfg.seed,
        "position_thinning": thinning,
        "mass_within_0.8L": ens.mass_within,
        "superposition": rep,
    }))
}

//! Implicit Euler mild solutions `u^{j+1} + h A_0 u^{j+1} = u^j`, the exponential formula,
//! the weak-form residual and the frozen-coefficient linearized equation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coefficients::{CoefficientSet, ScalarFunctionSpec};
use crate::krylov::gmres;
use crate::resolvent::{self, ResolventControls, SolverError};
use crate::spectral::{Field, Grid, SpectralContext, SpectralError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvolutionError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("step {step} failed: {source}")]
    Step { step: usize, source: SolverError },
    #[error("linear solve did not converge at step {step} (l1 residual {residual:e})")]
    LinearSolve { step: usize, residual: f64 },
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

#[derive(Debug, Clone)]
pub struct EvolutionConfig {
    pub t_final: f64,
    pub h: f64,
    pub cs: CoefficientSet,
    pub controls: ResolventControls,
    /// Keep every `snapshot_stride`-th iterate (the final one is always kept).
    pub snapshot_stride: usize,
}

impl EvolutionConfig {
    pub fn steps(&self) -> usize {
        // Tolerate T/h landing just below an integer.
        ((self.t_final / self.h) * (1.0 + 1e-12)).floor() as usize
    }

    fn validate(&self) -> Result<(), EvolutionError> {
        if !(self.h > 0.0 && self.h <= self.t_final && self.t_final.is_finite()) {
            return Err(EvolutionError::InvalidConfig(format!("need 0 < h <= T, got h = {}, T = {}", self.h, self.t_final)));
        }
        if self.snapshot_stride == 0 {
            return Err(EvolutionError::InvalidConfig("snapshot_stride must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub t: f64,
    pub mass: f64,
    pub min: f64,
    pub linf: f64,
    /// l1 residual of the last resolvent stage (0 for the initial datum).
    pub residual: f64,
    /// `|u^{j+1}|_∞ ≤ (1 + M^{1/2})|u^j|_∞` held for this step.
    pub sup_bound_ok: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolutionPath {
    pub times: Vec<f64>,
    pub fields: Vec<Field>,
    pub h: f64,
    pub traces: Vec<TraceRow>,
    pub warnings: Vec<String>,
    /// Set when a step failed; the path holds everything computed before it.
    pub failure: Option<String>,
}

impl SolutionPath {
    fn start(u0: &Field, h: f64) -> Self {
        SolutionPath {
            times: vec![0.0],
            fields: vec![u0.clone()],
            h,
            traces: vec![TraceRow { step: 0, t: 0.0, mass: u0.mass(), min: u0.min(), linf: u0.linf(), residual: 0.0, sup_bound_ok: true }],
            warnings: Vec::new(),
            failure: None,
        }
    }

    pub fn grid(&self) -> &Grid {
        self.fields[0].grid()
    }

    pub fn last(&self) -> &Field {
        self.fields.last().expect("path is never empty")
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("path is never empty")
    }

    /// Largest `|∫u(t) − ∫u0| / |u0|_1` over the traces.
    pub fn max_relative_mass_drift(&self) -> f64 {
        let m0 = self.traces[0].mass;
        let scale = self.fields[0].l1().max(f64::MIN_POSITIVE);
        self.traces.iter().map(|r| (r.mass - m0).abs() / scale).fold(0.0, f64::max)
    }

    pub fn min_over_time(&self) -> f64 {
        self.traces.iter().map(|r| r.min).fold(f64::INFINITY, f64::min)
    }

    /// Piecewise-constant value `u_h(t) = u^j` for `t ∈ [jh, (j+1)h)` among the stored snapshots.
    pub fn at(&self, t: f64) -> &Field {
        let idx = self.times.partition_point(|&s| s <= t + 1e-12 * self.h);
        &self.fields[idx.saturating_sub(1)]
    }
}

fn m_constant(cs: &CoefficientSet, grid: &Grid) -> f64 {
    let probes: Vec<Vec<f64>> = (0..grid.len()).map(|i| grid.point(i)[..grid.dim].to_vec()).collect();
    cs.drift.m_constant(&probes)
}

/// One implicit Euler step `J_h(u_j)`.
pub fn step(u: &Field, h: f64, cs: &CoefficientSet, controls: &ResolventControls) -> Result<Field, SolverError> {
    Ok(resolvent::resolvent_j(u, h, cs, controls)?.y)
}

/// Implicit Euler path on `[0, T]`. A failing step ends the path early with `failure` set.
pub fn evolve(u0: &Field, cfg: &EvolutionConfig) -> Result<SolutionPath, EvolutionError> {
    cfg.validate()?;
    if u0.values().iter().any(|v| !v.is_finite()) {
        return Err(EvolutionError::InvalidConfig("initial datum is not finite".into()));
    }
    let grid = *u0.grid();
    let sup_factor = 1.0 + m_constant(&cfg.cs, &grid).sqrt();
    let steps = cfg.steps();
    let mut path = SolutionPath::start(u0, cfg.h);
    let mut u = u0.clone();
    for j in 0..steps {
        let out = match resolvent::resolvent_j(&u, cfg.h, &cfg.cs, &cfg.controls) {
            Ok(out) => out,
            Err(e) => {
                path.failure = Some(EvolutionError::Step { step: j + 1, source: e }.to_string());
                return Ok(path);
            }
        };
        if j == 0 {
            path.warnings.extend(out.warnings.iter().cloned());
        }
        let next = out.y;
        let t = (j + 1) as f64 * cfg.h;
        path.traces.push(TraceRow {
            step: j + 1,
            t,
            mass: next.mass(),
            min: next.min(),
            linf: next.linf(),
            residual: out.stages.last().map_or(0.0, |s| s.residual_l1),
            sup_bound_ok: next.linf() <= sup_factor * u.linf() * (1.0 + 1e-9) + 1e-12,
        });
        if (j + 1) % cfg.snapshot_stride == 0 || j + 1 == steps {
            path.times.push(t);
            path.fields.push(next.clone());
        }
        u = next;
    }
    Ok(path)
}

/// `(I + (t/n) A)^{-n} u0`.
pub fn exponential_formula(u0: &Field, t: f64, n: usize, cs: &CoefficientSet, controls: &ResolventControls) -> Result<Field, SolverError> {
    if n == 0 {
        return Err(SolverError::InvalidProblem("n must be positive".into()));
    }
    let lambda = t / n as f64;
    let mut u = u0.clone();
    for _ in 0..n {
        u = step(&u, lambda, cs, controls)?;
    }
    Ok(u)
}

/// Time factor of a separable test function; vanishes with all derivatives at `t_end`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeWindow {
    pub t_end: f64,
}

impl TimeWindow {
    pub fn value(&self, t: f64) -> f64 {
        let u = t / self.t_end;
        if u >= 1.0 {
            0.0
        } else {
            (1.0 - 1.0 / (1.0 - u * u)).exp()
        }
    }
}

/// `φ(t, x) = χ(t) ψ(x)` with `ψ(x) = cos(k·x)` or `sin(k·x)`; `k` in units of `π/L`.
#[derive(Debug, Clone, PartialEq)]
pub struct TestFunction {
    pub window: TimeWindow,
    pub mode: Vec<i64>,
    pub sine: bool,
}

impl TestFunction {
    pub fn zero(window: TimeWindow, dim: usize) -> Self {
        TestFunction { window, mode: vec![0; dim], sine: true }
    }

    /// Five trigonometric test functions of low frequency.
    pub fn catalog(t_end: f64, dim: usize) -> Vec<TestFunction> {
        let window = TimeWindow { t_end };
        let unit = |k: i64| {
            let mut m = vec![0; dim];
            m[0] = k;
            m
        };
        vec![
            TestFunction { window, mode: unit(1), sine: false },
            TestFunction { window, mode: unit(2), sine: false },
            TestFunction { window, mode: unit(3), sine: false },
            TestFunction { window, mode: unit(1), sine: true },
            TestFunction { window, mode: unit(2), sine: true },
        ]
    }

    fn wavevector(&self, grid: &Grid) -> Vec<f64> {
        self.mode.iter().map(|&k| k as f64 * grid.dxi()).collect()
    }

    /// `(ψ, ∇ψ)` sampled on the grid.
    fn spatial(&self, grid: &Grid) -> (Vec<f64>, Vec<Vec<f64>>) {
        let k = self.wavevector(grid);
        let mut psi = Vec::with_capacity(grid.len());
        let mut grad = vec![Vec::with_capacity(grid.len()); grid.dim];
        for i in 0..grid.len() {
            let x = grid.point(i);
            let phase: f64 = k.iter().zip(&x).map(|(a, b)| a * b).sum();
            let (v, dv) = if self.sine { (phase.sin(), phase.cos()) } else { (phase.cos(), -phase.sin()) };
            psi.push(v);
            for (a, g) in grad.iter_mut().enumerate() {
                g.push(k[a] * dv);
            }
        }
        (psi, grad)
    }
}

/// Weak-form residual of the piecewise-constant path against `φ = χ ψ`:
/// `|Σ_j [χ]_j ⟨u^j,ψ⟩ + χ(0)⟨u0,ψ⟩ + Σ_j ∫χ (−|k|^{2s}⟨β(u^j),ψ⟩ + ⟨b(u^j)u^j D, ∇ψ⟩)|`.
/// Intended for paths stored at every step.
pub fn distributional_residual(path: &SolutionPath, phi: &TestFunction, cs: &CoefficientSet) -> f64 {
    if phi.mode.iter().all(|&k| k == 0) && phi.sine {
        return 0.0;
    }
    let grid = *path.grid();
    let dv = grid.cell_volume();
    let (psi, grad) = phi.spatial(&grid);
    let k2: f64 = phi.wavevector(&grid).iter().map(|k| k * k).sum();
    let symbol = if k2 == 0.0 { 0.0 } else { k2.powf(cs.s) };
    let drift: Vec<[f64; 3]> = if cs.drift.is_zero() {
        Vec::new()
    } else {
        (0..grid.len()).map(|i| cs.drift.eval(&grid.point(i)[..grid.dim])).collect()
    };
    let chi = |t: f64| phi.window.value(t);
    let pair = |f: &Field| -> (f64, f64) {
        let u = f.values();
        let mass_term: f64 = u.iter().zip(&psi).map(|(a, b)| a * b).sum::<f64>() * dv;
        let mut flux = -symbol * u.iter().zip(&psi).map(|(&v, p)| cs.beta.eval(v) * p).sum::<f64>() * dv;
        if !drift.is_empty() {
            let mut acc = 0.0;
            for (i, &v) in u.iter().enumerate() {
                let c = cs.b.eval(v) * v;
                acc += c * (0..grid.dim).map(|a| drift[i][a] * grad[a][i]).sum::<f64>();
            }
            flux += acc * dv;
        }
        (mass_term, flux)
    };
    let t_end = phi.window.t_end;
    let mut total = chi(0.0) * pair(&path.fields[0]).0;
    for (j, f) in path.fields.iter().enumerate() {
        let a = path.times[j];
        let b = path.times.get(j + 1).copied().unwrap_or(t_end).min(t_end);
        if b <= a {
            continue;
        }
        let (m, fl) = pair(f);
        total += (chi(b) - chi(a)) * m + 0.5 * (chi(a) + chi(b)) * (b - a) * fl;
    }
    total.abs()
}

/// `β(u)/u` with `β(0)/0 := 0`.
fn ratio(beta: &ScalarFunctionSpec, u: f64) -> f64 {
    if u == 0.0 {
        0.0
    } else {
        beta.eval(u) / u
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearSolveControls {
    pub tol_l1: f64,
    pub gmres_rtol: f64,
    pub restart: usize,
    pub max_iter: usize,
    pub refinements: usize,
    /// Regularization in the spectral preconditioner `(ε_p + |ξ|²)^{-s}`.
    pub eps_p: f64,
}

impl Default for LinearSolveControls {
    fn default() -> Self {
        LinearSolveControls { tol_l1: 1e-11, gmres_rtol: 1e-12, restart: 80, max_iter: 800, refinements: 8, eps_p: 1e-3 }
    }
}

/// Implicit Euler for `y_t + (−Δ)^s((β(u)/u) y) + div(y D b(u)) = 0` with `u` frozen along
/// `u_frozen`; step `j+1` uses the coefficients of `u^{j+1}`.
pub fn evolve_linearized(
    u_frozen: &SolutionPath,
    v0: &Field,
    cs: &CoefficientSet,
    controls: &LinearSolveControls,
) -> Result<SolutionPath, EvolutionError> {
    let grid = *v0.grid();
    if u_frozen.grid() != &grid {
        return Err(EvolutionError::Spectral(SpectralError::GridMismatch));
    }
    let h = u_frozen.h;
    let ctx = SpectralContext::get(&grid);
    let s = cs.s;
    let b_mult = ctx.radial_table(|k2| if k2 == 0.0 { 0.0 } else { k2.powf(s) });
    let p_mult = ctx.radial_table(|k2| (controls.eps_p + k2).powf(-s));
    let drift: Vec<Vec<f64>> = if cs.drift.is_zero() {
        Vec::new()
    } else {
        let mut comps = vec![Vec::with_capacity(grid.len()); grid.dim];
        for i in 0..grid.len() {
            let d = cs.drift.eval(&grid.point(i)[..grid.dim]);
            for (a, c) in comps.iter_mut().enumerate() {
                c.push(d[a]);
            }
        }
        comps
    };
    let mut path = SolutionPath::start(v0, h);
    let mut v = v0.clone();
    for (j, u) in u_frozen.fields.iter().enumerate().skip(1) {
        let a: Vec<f64> = u.values().iter().map(|&x| ratio(&cs.beta, x)).collect();
        let c: Vec<f64> = u.values().iter().map(|&x| cs.b.eval(x)).collect();
        let lam = u_frozen.times[j] - u_frozen.times[j - 1];
        let apply_l = |y: &[f64]| -> Vec<f64> {
            let ay: Vec<f64> = y.iter().zip(&a).map(|(p, q)| p * q).collect();
            let mut spec = ctx.dft(&ay);
            for (z, m) in spec.iter_mut().zip(&b_mult) {
                *z *= *m;
            }
            for (axis, comp) in drift.iter().enumerate() {
                let flux: Vec<f64> = comp.iter().zip(&c).zip(y).map(|((d, cc), yy)| d * cc * yy).collect();
                let fs = ctx.dft(&flux);
                for ((z, w), k) in spec.iter_mut().zip(&fs).zip(ctx.xi_deriv(axis)) {
                    *z += w * num_complex::Complex64::new(0.0, *k);
                }
            }
            let op = ctx.idft_real(spec);
            y.iter().zip(&op).map(|(p, q)| p + lam * q).collect()
        };
        let abar = a.iter().sum::<f64>() / a.len() as f64;
        let r_mult: Vec<f64> = p_mult.iter().zip(&b_mult).map(|(p, b)| 1.0 / (p * (1.0 + lam * abar * b))).collect();
        let rhs = v.values().to_vec();
        let mut y = rhs.clone();
        let mut res_l1 = f64::INFINITY;
        for _ in 0..=controls.refinements {
            let ly = apply_l(&y);
            let r: Vec<f64> = rhs.iter().zip(&ly).map(|(p, q)| p - q).collect();
            res_l1 = r.iter().map(|x| x.abs()).sum::<f64>() * grid.cell_volume();
            if res_l1 <= controls.tol_l1 {
                break;
            }
            let pr = ctx.filter(&r, &p_mult);
            let op = |z: &[f64]| -> Vec<f64> {
                let w = ctx.filter(z, &r_mult);
                ctx.filter(&apply_l(&w), &p_mult)
            };
            let (z, _) = gmres(op, &pr, controls.gmres_rtol, controls.restart, controls.max_iter);
            let dy = ctx.filter(&z, &r_mult);
            for (yi, di) in y.iter_mut().zip(&dy) {
                *yi += di;
            }
        }
        if res_l1 > controls.tol_l1 {
            path.failure = Some(EvolutionError::LinearSolve { step: j, residual: res_l1 }.to_string());
            return Ok(path);
        }
        let next = Field::new(grid, y)?;
        path.traces.push(TraceRow {
            step: j,
            t: u_frozen.times[j],
            mass: next.mass(),
            min: next.min(),
            linf: next.linf(),
            residual: res_l1,
            sup_bound_ok: true,
        });
        path.times.push(u_frozen.times[j]);
        path.fields.push(next.clone());
        v = next;
    }
    Ok(path)
}

/// `e^{−t|ξ|^{2s}} u0`, the exact flow of `u_t + (−Δ)^s u = 0`.
pub fn linear_exact_flow(u0: &Field, t: f64, s: f64) -> Field {
    let ctx = SpectralContext::get(u0.grid());
    Field::new(*u0.grid(), ctx.filter_radial(u0.values(), |k2| (-t * k2.powf(s)).exp())).expect("finite")
}

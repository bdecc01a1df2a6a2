//! Particle simulation of the Nemytskii-type McKean–Vlasov SDE
//! `dX = D(X) b(u(X)) dt + (β(u(X))/u(X))^{1/(2s)} dL` driven by isotropic `2s`-stable noise,
//! with periodic kernel density estimation and comparison against PDE solutions.
//!
//! Increments are sampled exactly by subordination, `ΔL = √(2S)·G` with `S` one-sided stable.
//! The driving process is normalized so that `E e^{iξ·ΔL} = e^{−dt|ξ|^{2s}}`, which makes the
//! linear case reproduce the PDE flow `e^{−t|ξ|^{2s}}` without a separate `c_{d,s}`.
//!
//! Each particle draws from its own ChaCha stream keyed by `(seed, particle, step)`, so paths are
//! bitwise reproducible for any worker count.

use std::f64::consts::PI;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coefficients::CoefficientSet;
use crate::evolution::SolutionPath;
use crate::spectral::{Field, Grid, SpectralError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParticleError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite particle state at step {step}, particle {particle}")]
    NonfiniteState { step: u64, particle: usize },
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

/// Worker pool capped by `FRACFP_THREADS` when set.
pub fn thread_pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = std::env::var("FRACFP_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
            if n > 0 {
                builder = builder.num_threads(n);
            }
        }
        builder.build().expect("thread pool")
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevyConfig {
    pub s: f64,
    pub dt: f64,
    /// Caps the length of a single jump; `None` leaves jumps uncapped (wrapping handles them).
    #[serde(default)]
    pub big_jump_cap: Option<f64>,
    pub seed: u64,
    pub n_particles: usize,
}

impl LevyConfig {
    pub fn validate(&self) -> Result<(), ParticleError> {
        if !(self.s > 0.5 && self.s < 1.0) {
            return Err(ParticleError::InvalidConfig(format!("s = {} must lie in (1/2, 1)", self.s)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(ParticleError::InvalidConfig(format!("dt = {} must be positive", self.dt)));
        }
        if self.n_particles == 0 {
            return Err(ParticleError::InvalidConfig("particle count must be at least 1".into()));
        }
        if let Some(r) = self.big_jump_cap {
            if !(r > 0.0) {
                return Err(ParticleError::InvalidConfig(format!("jump cap {r} must be positive")));
            }
        }
        Ok(())
    }
}

/// Generator for particle `index` at counter `slot` (slot 0 is initial sampling, step `j` uses `j + 1`).
pub fn particle_rng(seed: u64, index: usize, slot: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng.set_word_pos((slot as u128) << 32);
    rng
}

/// Kanter's representation of the one-sided stable law with Laplace transform `e^{−λ^s}`.
fn stable_unit<R: Rng + ?Sized>(s: f64, rng: &mut R) -> f64 {
    let u = loop {
        let u: f64 = rng.random::<f64>() * PI;
        if u > 0.0 {
            break u;
        }
    };
    let e: f64 = Exp1.sample(rng);
    let ln_a = (s * (s * u).sin().ln() + (1.0 - s) * ((1.0 - s) * u).sin().ln() - u.sin().ln()) / (1.0 - s);
    ((ln_a - e.ln()) * (1.0 - s) / s).exp()
}

/// Increment over `dt` of the `s`-stable subordinator: `dt^{1/s}` times a unit-time draw.
pub fn sample_subordinator<R: Rng + ?Sized>(s: f64, dt: f64, rng: &mut R) -> f64 {
    dt.powf(1.0 / s) * stable_unit(s, rng)
}

/// `√(2S)·G` with `S` the subordinator increment and `G` standard Gaussian in `ℝ^d`.
pub fn sample_isotropic_stable<R: Rng + ?Sized>(s: f64, dt: f64, d: usize, rng: &mut R) -> [f64; 3] {
    let scale = (2.0 * sample_subordinator(s, dt, rng)).sqrt();
    let mut x = [0.0; 3];
    for xa in x.iter_mut().take(d) {
        let g: f64 = StandardNormal.sample(rng);
        *xa = scale * g;
    }
    x
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub dim: usize,
    /// Row-major `N × d` coordinates in `[−L, L)^d`.
    pub positions: Vec<f64>,
    pub time: f64,
    /// Steps taken so far; with `seed` this is the full generator state.
    pub step: u64,
    pub seed: u64,
}

impl ParticleEnsemble {
    pub fn len(&self) -> usize {
        self.positions.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    /// Fraction of particles with every coordinate inside `[−r, r]`.
    pub fn fraction_within(&self, r: f64) -> f64 {
        let inside = self.positions.chunks(self.dim).filter(|p| p.iter().all(|x| x.abs() <= r)).count();
        inside as f64 / self.len() as f64
    }

    /// Empirical `(1/N) Σ e^{−iξ·X}` as `(re, im)`.
    pub fn char_function(&self, xi: &[f64]) -> (f64, f64) {
        let (mut re, mut im) = (0.0, 0.0);
        for p in self.positions.chunks(self.dim) {
            let ph: f64 = p.iter().zip(xi).map(|(x, k)| x * k).sum();
            re += ph.cos();
            im -= ph.sin();
        }
        let n = self.len() as f64;
        (re / n, im / n)
    }
}

/// Multilinear interpolation of a grid field at `x` with periodic wrap.
pub fn interpolate(u: &Field, x: &[f64]) -> f64 {
    let g = u.grid();
    let dx = g.dx();
    let mut base = [0usize; 3];
    let mut frac = [0.0; 3];
    for a in 0..g.dim {
        let t = (g.wrap(x[a]) + g.half_width) / dx;
        let i = t.floor();
        base[a] = (i as usize) % g.n;
        frac[a] = t - i;
    }
    let vals = u.values();
    let mut acc = 0.0;
    for corner in 0..(1usize << g.dim) {
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        for a in 0..g.dim {
            if corner >> a & 1 == 1 {
                w *= frac[a];
                idx[a] = (base[a] + 1) % g.n;
            } else {
                w *= 1.0 - frac[a];
                idx[a] = base[a];
            }
        }
        if w != 0.0 {
            acc += w * vals[g.flat_index(&idx)];
        }
    }
    acc
}

/// `(β(u)/u)^{1/(2s)}`, with `β(0)/0 := 0` for `u ≤ 0`.
pub fn jump_coefficient(cs: &CoefficientSet, u: f64) -> f64 {
    if u <= 0.0 {
        return 0.0;
    }
    (cs.beta.eval(u) / u).max(0.0).powf(1.0 / (2.0 * cs.s))
}

/// One Euler–Maruyama step with density `u` frozen over the step.
pub fn euler_step(
    ens: &ParticleEnsemble,
    u: &Field,
    dt: f64,
    cs: &CoefficientSet,
    cap: Option<f64>,
) -> Result<ParticleEnsemble, ParticleError> {
    let g = *u.grid();
    if g.dim != ens.dim {
        return Err(ParticleError::InvalidConfig("ensemble and density dimensions differ".into()));
    }
    let d = ens.dim;
    let slot = ens.step + 1;
    let seed = ens.seed;
    let mut positions = ens.positions.clone();
    thread_pool().install(|| {
        positions.par_chunks_mut(d).enumerate().for_each(|(i, p)| {
            let ui = interpolate(u, p);
            let drift = cs.drift.eval(p);
            let bu = cs.b.eval(ui);
            let sigma = jump_coefficient(cs, ui);
            let mut rng = particle_rng(seed, i, slot);
            let mut jump = sample_isotropic_stable(cs.s, dt, d, &mut rng);
            for j in jump.iter_mut() {
                *j *= sigma;
            }
            if let Some(r) = cap {
                let len = jump[..d].iter().map(|v| v * v).sum::<f64>().sqrt();
                if len > r {
                    for j in jump.iter_mut() {
                        *j *= r / len;
                    }
                }
            }
            for a in 0..d {
                p[a] = g.wrap(p[a] + drift[a] * bu * dt + jump[a]);
            }
        })
    });
    if let Some(bad) = positions.iter().position(|x| !x.is_finite()) {
        return Err(ParticleError::NonfiniteState { step: slot, particle: bad / d });
    }
    Ok(ParticleEnsemble { dim: d, positions, time: ens.time + dt, step: slot, seed })
}

/// Draws `n` particles from the probability density `u0` (piecewise constant on grid cells).
///
/// d = 1 inverts the cell CDF; higher dimensions use rejection against the cell values.
pub fn sample_initial(u0: &Field, n: usize, seed: u64) -> Result<ParticleEnsemble, ParticleError> {
    let g = *u0.grid();
    let vals: Vec<f64> = u0.values().iter().map(|v| v.max(0.0)).collect();
    let total: f64 = vals.iter().sum();
    if !(total > 0.0) {
        return Err(ParticleError::InvalidConfig("initial density has no positive mass".into()));
    }
    let dx = g.dx();
    let d = g.dim;
    let mut positions = vec![0.0; n * d];
    if d == 1 {
        let mut cdf = Vec::with_capacity(vals.len());
        let mut acc = 0.0;
        for v in &vals {
            acc += v / total;
            cdf.push(acc);
        }
        thread_pool().install(|| {
            positions.par_iter_mut().enumerate().for_each(|(i, p)| {
                let mut rng = particle_rng(seed, i, 0);
                let q: f64 = rng.random();
                let cell = cdf.partition_point(|&c| c <= q).min(vals.len() - 1);
                let off: f64 = rng.random::<f64>() - 0.5;
                *p = g.wrap(g.point(cell)[0] + off * dx);
            })
        });
    } else {
        let vmax = vals.iter().cloned().fold(0.0, f64::max);
        thread_pool().install(|| {
            positions.par_chunks_mut(d).enumerate().for_each(|(i, p)| {
                let mut rng = particle_rng(seed, i, 0);
                loop {
                    let mut idx = [0usize; 3];
                    for a in 0..d {
                        p[a] = -g.half_width + rng.random::<f64>() * 2.0 * g.half_width;
                        idx[a] = (((p[a] + g.half_width) / dx + 0.5).floor() as usize) % g.n;
                    }
                    if rng.random::<f64>() * vmax < vals[g.flat_index(&idx)] {
                        break;
                    }
                }
            })
        });
    }
    Ok(ParticleEnsemble { dim: d, positions, time: 0.0, step: 0, seed })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityEstimate {
    pub values: Field,
    pub bandwidth: f64,
    /// `sqrt(2/π) ∫ sqrt(Var f̂(x)) dx`, the expected l1 size of the sampling noise.
    pub mc_l1_error: f64,
}

impl DensityEstimate {
    pub fn grid(&self) -> &Grid {
        self.values.grid()
    }
}

fn robust_scale(xs: &mut [f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    xs.sort_by(|a, b| a.total_cmp(b));
    let q = |p: f64| xs[((p * (xs.len() - 1) as f64).round() as usize).min(xs.len() - 1)];
    let iqr = (q(0.75) - q(0.25)) / 1.349;
    if iqr > 0.0 {
        std.min(iqr)
    } else {
        std
    }
}

/// `1.06 σ̂ N^{−1/(d+4)}` clipped to `[dx, L/4]`, with `σ̂ = min(std, IQR/1.349)` averaged over axes.
pub fn default_bandwidth(ens: &ParticleEnsemble, grid: &Grid) -> f64 {
    let d = ens.dim;
    let mut sigma = 0.0;
    for a in 0..d {
        let mut xs: Vec<f64> = ens.positions.iter().skip(a).step_by(d).cloned().collect();
        sigma += robust_scale(&mut xs);
    }
    sigma /= d as f64;
    let h = 1.06 * sigma * (ens.len() as f64).powf(-1.0 / (d as f64 + 4.0));
    h.clamp(grid.dx(), grid.half_width / 4.0)
}

const KDE_CHUNK: usize = 4096;

/// Per-axis kernel weights for one particle: start index and normalized samples.
fn axis_weights(x: f64, grid: &Grid, h: f64, m: usize, out: &mut Vec<f64>) -> usize {
    let dx = grid.dx();
    let t = (x + grid.half_width) / dx;
    let c = t.round() as i64;
    out.clear();
    let mut sum = 0.0;
    for k in -(m as i64)..=(m as i64) {
        let z = ((c + k) as f64 - t) * dx / h;
        let w = (-0.5 * z * z).exp();
        out.push(w);
        sum += w;
    }
    for w in out.iter_mut() {
        *w /= sum * dx;
    }
    (c - m as i64).rem_euclid(grid.n as i64) as usize
}

/// Periodic Gaussian KDE on `grid`, truncated at 8 bandwidths and normalized to unit mass.
///
/// Particles are accumulated in fixed-size chunks reduced in order, so the result does not
/// depend on the worker count.
pub fn estimate_density(ens: &ParticleEnsemble, grid: &Grid, bandwidth: Option<f64>) -> Result<DensityEstimate, ParticleError> {
    if grid.dim != ens.dim {
        return Err(ParticleError::InvalidConfig("ensemble and grid dimensions differ".into()));
    }
    if ens.is_empty() {
        return Err(ParticleError::InvalidConfig("empty ensemble".into()));
    }
    let h = bandwidth.unwrap_or_else(|| default_bandwidth(ens, grid));
    if !(h > 0.0 && h.is_finite()) {
        return Err(ParticleError::InvalidConfig(format!("bandwidth {h} must be positive")));
    }
    let d = ens.dim;
    let n = grid.n;
    let m = (8.0 * h / grid.dx()).ceil() as usize;
    let len = grid.len();
    let partials: Vec<(Vec<f64>, Vec<f64>)> = thread_pool().install(|| {
        ens.positions
            .par_chunks(KDE_CHUNK * d)
            .map(|chunk| {
                let mut f = vec![0.0; len];
                let mut f2 = vec![0.0; len];
                let mut w: Vec<Vec<f64>> = vec![Vec::new(); d];
                let mut start = [0usize; 3];
                for p in chunk.chunks(d) {
                    for a in 0..d {
                        start[a] = axis_weights(p[a], grid, h, m, &mut w[a]);
                    }
                    let width = 2 * m + 1;
                    let count = width.pow(d as u32);
                    for c in 0..count {
                        let mut rem = c;
                        let mut flat = 0usize;
                        let mut wt = 1.0;
                        for a in 0..d {
                            let k = rem % width;
                            rem /= width;
                            wt *= w[a][k];
                            flat = flat * n + (start[a] + k) % n;
                        }
                        f[flat] += wt;
                        f2[flat] += wt * wt;
                    }
                }
                (f, f2)
            })
            .collect()
    });
    let mut f = vec![0.0; len];
    let mut f2 = vec![0.0; len];
    for (pf, pf2) in &partials {
        for i in 0..len {
            f[i] += pf[i];
            f2[i] += pf2[i];
        }
    }
    let np = ens.len() as f64;
    let vol = grid.cell_volume();
    let mass: f64 = f.iter().sum::<f64>() / np * vol;
    let mut mc = 0.0;
    for i in 0..len {
        let mean = f[i] / np;
        let var = ((f2[i] / np - mean * mean) / np).max(0.0);
        mc += var.sqrt();
    }
    let values: Vec<f64> = f.iter().map(|v| v / np / mass).collect();
    Ok(DensityEstimate {
        values: Field::new(*grid, values)?,
        bandwidth: h,
        mc_l1_error: (2.0 / PI).sqrt() * mc * vol,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingMode {
    /// Coefficients read the given PDE path.
    Decoupled,
    /// Coefficients read a KDE of the ensemble itself, re-estimated every step.
    SelfConsistent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePath {
    pub mode: CouplingMode,
    pub config: LevyConfig,
    pub grid: Grid,
    pub snapshots: Vec<ParticleEnsemble>,
    /// Fraction of particles within `0.8·L` at each snapshot.
    pub mass_within: Vec<f64>,
}

impl EnsemblePath {
    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|e| e.time).collect()
    }

    pub fn last(&self) -> &ParticleEnsemble {
        self.snapshots.last().expect("path is never empty")
    }
}

/// Steps the ensemble from `u0` to `t_final`, keeping every `snapshot_stride`-th state and the last.
pub fn simulate(
    u0: &Field,
    cfg: &LevyConfig,
    cs: &CoefficientSet,
    mode: CouplingMode,
    pde_path: Option<&SolutionPath>,
    t_final: f64,
    snapshot_stride: usize,
) -> Result<EnsemblePath, ParticleError> {
    cfg.validate()?;
    if (cfg.s - cs.s).abs() > 1e-14 {
        return Err(ParticleError::InvalidConfig(format!("noise order {} differs from coefficient order {}", cfg.s, cs.s)));
    }
    if (u0.mass() - 1.0).abs() > 1e-6 {
        return Err(ParticleError::InvalidConfig(format!("initial density has mass {}, expected 1", u0.mass())));
    }
    let grid = *u0.grid();
    if cs.dim() != grid.dim {
        return Err(ParticleError::InvalidConfig("coefficient and grid dimensions differ".into()));
    }
    if mode == CouplingMode::Decoupled {
        let path = pde_path.ok_or_else(|| ParticleError::InvalidConfig("decoupled mode needs a PDE path".into()))?;
        if path.grid() != &grid {
            return Err(ParticleError::InvalidConfig("PDE path grid differs from the initial density grid".into()));
        }
        if path.final_time() + 1e-12 < t_final - cfg.dt {
            return Err(ParticleError::InvalidConfig("PDE path ends before the simulation horizon".into()));
        }
    }
    let steps = (t_final / cfg.dt).round() as u64;
    let stride = snapshot_stride.max(1) as u64;
    let mut ens = sample_initial(u0, cfg.n_particles, cfg.seed)?;
    let inner = 0.8 * grid.half_width;
    let mut snapshots = vec![ens.clone()];
    let mut mass_within = vec![ens.fraction_within(inner)];
    for j in 0..steps {
        let t = j as f64 * cfg.dt;
        let next = match mode {
            CouplingMode::Decoupled => euler_step(&ens, pde_path.expect("checked").at(t), cfg.dt, cs, cfg.big_jump_cap)?,
            CouplingMode::SelfConsistent => {
                let kde = estimate_density(&ens, &grid, None)?;
                euler_step(&ens, &kde.values, cfg.dt, cs, cfg.big_jump_cap)?
            }
        };
        ens = next;
        if (j + 1) % stride == 0 || j + 1 == steps {
            mass_within.push(ens.fraction_within(inner));
            snapshots.push(ens.clone());
        }
    }
    Ok(EnsemblePath { mode, config: *cfg, grid, snapshots, mass_within })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SnapshotComparison {
    pub t: f64,
    pub l1: f64,
    pub mc_error: f64,
    pub bandwidth: f64,
    /// `|φ̂_N(ξ_k) − φ_u(ξ_k)|` for the lowest modes `k = 1, 2, 3` along the first axis.
    pub char_distances: Vec<f64>,
    /// `3 sqrt((1 − |φ_u|²)/N)` for the same modes.
    pub char_bands: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuperpositionReport {
    pub rows: Vec<SnapshotComparison>,
    pub l1_tol: f64,
    pub passed: bool,
}

impl SuperpositionReport {
    pub fn final_l1(&self) -> f64 {
        self.rows.last().map(|r| r.l1).unwrap_or(f64::NAN)
    }

    pub fn max_l1(&self) -> f64 {
        self.rows.iter().map(|r| r.l1).fold(0.0, f64::max)
    }
}

/// `(1/∫u) ∫ u e^{−iξ·x} dx` as `(re, im)`.
pub fn field_char_function(u: &Field, xi: &[f64]) -> (f64, f64) {
    let g = u.grid();
    let (mut re, mut im, mut mass) = (0.0, 0.0, 0.0);
    for (i, v) in u.values().iter().enumerate() {
        let x = g.point(i);
        let ph: f64 = (0..g.dim).map(|a| x[a] * xi[a]).sum();
        re += v * ph.cos();
        im -= v * ph.sin();
        mass += v;
    }
    (re / mass, im / mass)
}

/// Compares KDEs of the ensemble snapshots with the PDE path at the snapshot times.
pub fn superposition_check(ens_path: &EnsemblePath, pde_path: &SolutionPath, l1_tol: f64) -> Result<SuperpositionReport, ParticleError> {
    let grid = ens_path.grid;
    if pde_path.grid() != &grid {
        return Err(ParticleError::InvalidConfig("PDE path grid differs from the ensemble grid".into()));
    }
    let mut rows = Vec::with_capacity(ens_path.snapshots.len());
    for ens in &ens_path.snapshots {
        let kde = estimate_density(ens, &grid, None)?;
        let u = pde_path.at(ens.time);
        let mass = u.mass();
        let l1 = kde.values.lincomb(1.0, u, -1.0 / mass).l1();
        let mut char_distances = Vec::new();
        let mut char_bands = Vec::new();
        for k in 1..=3 {
            let mut xi = vec![0.0; grid.dim];
            xi[0] = k as f64 * grid.dxi();
            let (er, ei) = ens.char_function(&xi);
            let (ur, ui) = field_char_function(u, &xi);
            char_distances.push((er - ur).hypot(ei - ui));
            char_bands.push(3.0 * ((1.0 - ur * ur - ui * ui).max(0.0) / ens.len() as f64).sqrt());
        }
        rows.push(SnapshotComparison { t: ens.time, l1, mc_error: kde.mc_l1_error, bandwidth: kde.bandwidth, char_distances, char_bands });
    }
    let passed = rows.iter().all(|r| r.l1 <= l1_tol);
    Ok(SuperpositionReport { rows, l1_tol, passed })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedComparisonRow {
    pub t: f64,
    pub l1_a: f64,
    pub l1_b: f64,
    pub pooled_mc_error: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedComparison {
    pub rows: Vec<SeedComparisonRow>,
    pub passed: bool,
}

/// Two reports agree when `|l1_a − l1_b| ≤ 2 sqrt(e_a² + e_b²)` at every common snapshot.
pub fn compare_seeds(a: &SuperpositionReport, b: &SuperpositionReport) -> Result<SeedComparison, ParticleError> {
    if a.rows.len() != b.rows.len() {
        return Err(ParticleError::InvalidConfig("reports have different snapshot counts".into()));
    }
    let mut rows = Vec::new();
    for (ra, rb) in a.rows.iter().zip(&b.rows) {
        if (ra.t - rb.t).abs() > 1e-12 {
            return Err(ParticleError::InvalidConfig(format!("snapshot times differ: {} vs {}", ra.t, rb.t)));
        }
        let pooled = ra.mc_error.hypot(rb.mc_error);
        rows.push(SeedComparisonRow { t: ra.t, l1_a: ra.l1, l1_b: rb.l1, pooled_mc_error: pooled, ok: (ra.l1 - rb.l1).abs() <= 2.0 * pooled });
    }
    let passed = rows.iter().all(|r| r.ok);
    Ok(SeedComparison { rows, passed })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SamplerCheckRow {
    /// `λ` for Laplace rows, `|ξ|` for characteristic-function rows.
    pub argument: f64,
    pub estimate: f64,
    pub exact: f64,
    pub std_error: f64,
    pub ok: bool,
}

/// Mean of `e^{−λS}` over `draws` subordinator increments against `e^{−dt λ^s}`, 3 standard errors.
pub fn laplace_check(s: f64, dt: f64, lambdas: &[f64], draws: usize, seed: u64) -> Vec<SamplerCheckRow> {
    let samples = draw_parallel(draws, seed, |rng| sample_subordinator(s, dt, rng));
    lambdas
        .iter()
        .map(|&lam| {
            let mean = samples.iter().map(|x| (-lam * x).exp()).sum::<f64>() / draws as f64;
            let exact = (-dt * lam.powf(s)).exp();
            let var = (-dt * (2.0 * lam).powf(s)).exp() - exact * exact;
            let se = (var.max(0.0) / draws as f64).sqrt();
            SamplerCheckRow { argument: lam, estimate: mean, exact, std_error: se, ok: (mean - exact).abs() <= 3.0 * se }
        })
        .collect()
}

/// Empirical characteristic function of `√(2S)G` at `ξ = |ξ| e_1` against `e^{−dt|ξ|^{2s}}`.
///
/// `estimate` is the modulus of the complex error, compared with `3 sqrt((1 − φ²)/N)`.
pub fn char_function_check(s: f64, dt: f64, d: usize, freqs: &[f64], draws: usize, seed: u64) -> Vec<SamplerCheckRow> {
    let samples = draw_parallel(draws, seed, |rng| sample_isotropic_stable(s, dt, d, rng));
    freqs
        .iter()
        .map(|&k| {
            let (mut re, mut im) = (0.0, 0.0);
            for x in &samples {
                re += (k * x[0]).cos();
                im += (k * x[0]).sin();
            }
            re /= draws as f64;
            im /= draws as f64;
            let exact = (-dt * k.powf(2.0 * s)).exp();
            let err = (re - exact).hypot(im);
            let se = ((1.0 - exact * exact).max(0.0) / draws as f64).sqrt();
            SamplerCheckRow { argument: k, estimate: err, exact, std_error: se, ok: err <= 3.0 * se }
        })
        .collect()
}

/// `draws` samples, draw `i` from stream `i` of the seeded generator.
pub fn draw_parallel<T: Send, F: Fn(&mut ChaCha8Rng) -> T + Sync>(draws: usize, seed: u64, f: F) -> Vec<T> {
    thread_pool().install(|| {
        (0..draws)
            .into_par_iter()
            .map(|i| {
                let mut rng = particle_rng(seed, i, 0);
                f(&mut rng)
            })
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{self, constant, constant_d, linear, zero_drift};
    use crate::kernel::eta_density;
    use crate::quadrature::{integrate, QuadSettings};
    use proptest::prelude::*;
    use rand::Rng;

    fn pure_noise(s: f64, d: usize) -> CoefficientSet {
        CoefficientSet::new(linear(1.0), constant(1.0), zero_drift(d), s).unwrap()
    }

    fn gaussian(grid: Grid, c: f64, w: f64) -> Field {
        let f = Field::from_fn(grid, |x| (-(x.iter().map(|v| (v - c).powi(2)).sum::<f64>()) / (2.0 * w * w)).exp()).unwrap();
        let m = f.mass();
        f.scaled(1.0 / m)
    }

    fn ks_two_sample(a: &mut [f64], b: &mut [f64]) -> f64 {
        a.sort_by(|x, y| x.total_cmp(y));
        b.sort_by(|x, y| x.total_cmp(y));
        let (mut i, mut j, mut dmax) = (0, 0, 0.0f64);
        while i < a.len() && j < b.len() {
            if a[i] <= b[j] {
                i += 1;
            } else {
                j += 1;
            }
            dmax = dmax.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
        }
        dmax
    }

    #[test]
    fn laplace_transform_matches() {
        for &s in &[0.3, 0.6, 0.75] {
            let rows = laplace_check(s, 0.7, &[0.5, 1.0, 2.0], 200_000, 11);
            for r in rows {
                assert!(r.ok, "s={s} {r:?}");
            }
        }
    }

    #[test]
    fn half_order_histogram_matches_closed_form() {
        // χ² against the closed-form s = 1/2 density on 20 equiprobable-ish bins.
        let n = 100_000;
        let samples = draw_parallel(n, 5, |rng| sample_subordinator(0.5, 1.0, rng));
        let edges: Vec<f64> = (0..=20).map(|k| 0.02 * 1.45f64.powi(k)).collect();
        let settings = QuadSettings { abs_tol: 1e-12, rel_tol: 1e-10, max_evals: 20_000 };
        let mut chi2 = 0.0;
        for w in edges.windows(2) {
            let p = integrate(|r| eta_density(0.5, r).unwrap(), w[0], w[1], &settings).unwrap().value;
            let obs = samples.iter().filter(|&&x| x >= w[0] && x < w[1]).count() as f64;
            let exp = p * n as f64;
            chi2 += (obs - exp).powi(2) / exp;
        }
        // 95% quantile of χ² with 20 degrees of freedom.
        assert!(chi2 < 31.41, "chi2 = {chi2}");
    }

    #[test]
    fn time_scaling_is_equidistributed() {
        let n = 20_000;
        let dt: f64 = 0.05;
        let s = 0.7;
        let mut a = draw_parallel(n, 1, |rng| sample_subordinator(s, dt, rng));
        let mut b = draw_parallel(n, 2, |rng| dt.powf(1.0 / s) * sample_subordinator(s, 1.0, rng));
        let dks = ks_two_sample(&mut a, &mut b);
        // Two-sample KS critical value at 5%.
        assert!(dks < 1.358 * (2.0 / n as f64).sqrt(), "D = {dks}");
    }

    #[test]
    fn isotropic_char_function() {
        let rows = char_function_check(0.75, 0.3, 2, &[0.25, 0.5, 1.0, 2.0], 200_000, 3);
        for r in rows {
            assert!(r.ok, "{r:?}");
        }
    }

    #[test]
    fn components_are_identically_distributed() {
        let v = draw_parallel(20_000, 9, |rng| sample_isotropic_stable(0.7, 0.5, 3, rng));
        let mut x: Vec<f64> = v.iter().map(|p| p[0]).collect();
        let mut z: Vec<f64> = v.iter().map(|p| p[2]).collect();
        // Components share the subordinator, so use a conservative bound.
        assert!(ks_two_sample(&mut x, &mut z) < 0.03);
    }

    #[test]
    fn initial_sampling_ks() {
        let grid = Grid::new(1, 128, 8.0).unwrap();
        let u0 = gaussian(grid, 0.5, 0.7);
        let n = 50_000;
        let ens = sample_initial(&u0, n, 4).unwrap();
        let mut xs = ens.positions.clone();
        xs.sort_by(|a, b| a.total_cmp(b));
        let cdf = |x: f64| 0.5 * (1.0 + statrs::function::erf::erf((x - 0.5) / (0.7 * 2f64.sqrt())));
        let dks = xs.iter().enumerate().map(|(i, &x)| ((i + 1) as f64 / n as f64 - cdf(x)).abs()).fold(0.0, f64::max);
        assert!(dks <= 2.0 / (n as f64).sqrt() + grid.dx() * 0.6, "D = {dks}");
    }

    #[test]
    fn rejection_sampling_in_two_dimensions() {
        let grid = Grid::new(2, 32, 4.0).unwrap();
        let u0 = gaussian(grid, 0.0, 0.8);
        let ens = sample_initial(&u0, 20_000, 8).unwrap();
        let var: f64 = ens.positions.iter().map(|x| x * x).sum::<f64>() / ens.positions.len() as f64;
        // Piecewise-constant cells add dx²/12 to the variance.
        assert!((var - 0.64 - grid.dx().powi(2) / 12.0).abs() < 0.03, "var = {var}");
    }

    #[test]
    fn pure_noise_wrapped_char_function() {
        let grid = Grid::new(1, 64, 4.0).unwrap();
        let s = 0.75;
        let cs = pure_noise(s, 1);
        let cfg = LevyConfig { s, dt: 0.05, big_jump_cap: None, seed: 21, n_particles: 40_000 };
        let mut ens = ParticleEnsemble { dim: 1, positions: vec![0.0; cfg.n_particles], time: 0.0, step: 0, seed: cfg.seed };
        let u = Field::constant(grid, 1.0);
        for _ in 0..10 {
            ens = euler_step(&ens, &u, cfg.dt, &cs, None).unwrap();
        }
        for k in 1..=3 {
            let xi = k as f64 * grid.dxi();
            let (re, im) = ens.char_function(&[xi]);
            let exact = (-ens.time * xi.powf(2.0 * s)).exp();
            let band = 3.0 * ((1.0 - exact * exact) / cfg.n_particles as f64).sqrt();
            assert!((re - exact).hypot(im) <= band, "k={k}");
        }
    }

    #[test]
    fn zero_density_moves_only_by_drift() {
        let grid = Grid::new(1, 32, 4.0).unwrap();
        let cs = CoefficientSet::new(linear(1.0), constant(1.0), constant_d(&[0.5]), 0.75).unwrap();
        let ens = ParticleEnsemble { dim: 1, positions: vec![-1.0, 0.3, 2.2], time: 0.0, step: 0, seed: 1 };
        let next = euler_step(&ens, &Field::zeros(grid), 0.1, &cs, None).unwrap();
        for (a, b) in ens.positions.iter().zip(&next.positions) {
            assert!((b - a - 0.05).abs() < 1e-14);
        }
    }

    #[test]
    fn drift_dominated_mean_displacement() {
        let grid = Grid::new(2, 16, 4.0).unwrap();
        let beta = coefficients::linear(1e-8);
        let cs = CoefficientSet::new(beta, constant(1.0), constant_d(&[1.0, 0.0]), 0.75).unwrap();
        let n = 10_000;
        let ens = ParticleEnsemble { dim: 2, positions: vec![0.0; 2 * n], time: 0.0, step: 0, seed: 3 };
        let next = euler_step(&ens, &Field::constant(grid, 0.01), 0.01, &cs, None).unwrap();
        let mean_x = next.positions.iter().step_by(2).sum::<f64>() / n as f64;
        let mean_y = next.positions.iter().skip(1).step_by(2).sum::<f64>() / n as f64;
        // Jumps are scaled by (1e-8)^{2/3}, so medians sit at the drift; the mean is robust at this scale.
        assert!((mean_x - 0.01).abs() < 1e-4, "{mean_x}");
        assert!(mean_y.abs() < 1e-4, "{mean_y}");
    }

    #[test]
    fn single_particle_kde() {
        let grid = Grid::new(1, 64, 4.0).unwrap();
        let x0 = grid.point(40)[0];
        let ens = ParticleEnsemble { dim: 1, positions: vec![x0], time: 0.0, step: 0, seed: 0 };
        let h = 0.3;
        let est = estimate_density(&ens, &grid, Some(h)).unwrap();
        assert!((est.values.mass() - 1.0).abs() < 1e-12);
        let v = est.values.values();
        let peak = v.iter().cloned().fold(0.0, f64::max);
        assert_eq!(v[40], peak);
        assert!((v[41] / v[40] - (-0.5 * (grid.dx() / h).powi(2)).exp()).abs() < 1e-12);
        assert!((v[39] - v[41]).abs() < 1e-14);
    }

    #[test]
    fn kde_wraps_across_the_boundary() {
        let grid = Grid::new(1, 32, 2.0).unwrap();
        let ens = ParticleEnsemble { dim: 1, positions: vec![-2.0], time: 0.0, step: 0, seed: 0 };
        let est = estimate_density(&ens, &grid, Some(0.25)).unwrap();
        let v = est.values.values();
        assert!((v[1] - v[31]).abs() < 1e-14);
    }

    #[test]
    fn uniform_sample_flattens() {
        let grid = Grid::new(1, 64, 4.0).unwrap();
        let n = 100_000;
        let positions = draw_parallel(n, 13, |rng| -4.0 + 8.0 * rng.random::<f64>());
        let ens = ParticleEnsemble { dim: 1, positions, time: 0.0, step: 0, seed: 0 };
        let h = 0.5;
        let est = estimate_density(&ens, &grid, Some(h)).unwrap();
        let dev = est.values.values().iter().map(|v| (v - 0.125).abs()).fold(0.0, f64::max);
        let scale = (0.125 / (n as f64 * h)).sqrt();
        assert!(dev < 6.0 * scale, "dev {dev} scale {scale}");
    }

    #[test]
    fn bandwidth_is_clipped() {
        let grid = Grid::new(1, 64, 4.0).unwrap();
        let tight = ParticleEnsemble { dim: 1, positions: vec![0.0, 1e-6, -1e-6, 2e-6], time: 0.0, step: 0, seed: 0 };
        assert_eq!(default_bandwidth(&tight, &grid), grid.dx());
        let wide = ParticleEnsemble { dim: 1, positions: vec![-3.9, 3.9, -3.0, 3.0], time: 0.0, step: 0, seed: 0 };
        assert_eq!(default_bandwidth(&wide, &grid), 1.0);
    }

    #[test]
    fn kde_independent_of_worker_count() {
        let grid = Grid::new(2, 16, 2.0).unwrap();
        let pos = draw_parallel(3 * KDE_CHUNK + 17, 2, |rng| [rng.random::<f64>() * 4.0 - 2.0, rng.random::<f64>() * 4.0 - 2.0]);
        let ens = ParticleEnsemble { dim: 2, positions: pos.iter().flat_map(|p| p.to_vec()).collect(), time: 0.0, step: 0, seed: 0 };
        let a = estimate_density(&ens, &grid, Some(0.3)).unwrap();
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = single.install(|| estimate_density(&ens, &grid, Some(0.3)).unwrap());
        assert_eq!(a.values.values(), b.values.values());
    }

    #[test]
    fn reproducible_paths() {
        let grid = Grid::new(1, 32, 4.0).unwrap();
        let s = 0.75;
        let cs = pure_noise(s, 1);
        let u0 = gaussian(grid, 0.0, 0.5);
        let cfg = LevyConfig { s, dt: 0.01, big_jump_cap: None, seed: 77, n_particles: 2000 };
        let a = simulate(&u0, &cfg, &cs, CouplingMode::SelfConsistent, None, 0.05, 2).unwrap();
        let b = simulate(&u0, &cfg, &cs, CouplingMode::SelfConsistent, None, 0.05, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.snapshots.len(), 4);
        let c = simulate(&u0, &LevyConfig { seed: 78, ..cfg }, &cs, CouplingMode::SelfConsistent, None, 0.05, 2).unwrap();
        assert_ne!(a.last().positions, c.last().positions);
    }

    #[test]
    fn jump_cap_limits_steps() {
        let grid = Grid::new(1, 32, 50.0).unwrap();
        let cs = pure_noise(0.6, 1);
        let ens = ParticleEnsemble { dim: 1, positions: vec![0.0; 5000], time: 0.0, step: 0, seed: 4 };
        let next = euler_step(&ens, &Field::constant(grid, 1.0), 1.0, &cs, Some(0.5)).unwrap();
        assert!(next.positions.iter().all(|x| x.abs() <= 0.5 + 1e-12));
    }

    #[test]
    fn config_validation() {
        let ok = LevyConfig { s: 0.75, dt: 0.01, big_jump_cap: None, seed: 0, n_particles: 10 };
        assert!(ok.validate().is_ok());
        assert!(LevyConfig { s: 0.4, ..ok }.validate().is_err());
        assert!(LevyConfig { dt: 0.0, ..ok }.validate().is_err());
        assert!(LevyConfig { n_particles: 0, ..ok }.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn kde_has_unit_mass(xs in proptest::collection::vec(-4.0f64..4.0, 1..200), h in 0.13f64..1.0) {
            let grid = Grid::new(1, 64, 4.0).unwrap();
            let ens = ParticleEnsemble { dim: 1, positions: xs, time: 0.0, step: 0, seed: 0 };
            let est = estimate_density(&ens, &grid, Some(h)).unwrap();
            prop_assert!((est.values.mass() - 1.0).abs() < 1e-10);
            prop_assert!(est.values.min() >= 0.0);
        }

        #[test]
        fn subordinator_is_positive(seed in any::<u64>(), s in 0.05f64..0.95, dt in 1e-4f64..10.0) {
            let mut rng = particle_rng(seed, 0, 0);
            for _ in 0..50 {
                let x = sample_subordinator(s, dt, &mut rng);
                prop_assert!(x > 0.0 && x.is_finite());
            }
        }

        #[test]
        fn interpolation_hits_nodes(i in 0usize..32, c in -2.0f64..2.0) {
            let grid = Grid::new(1, 32, 3.0).unwrap();
            let u = Field::from_fn(grid, |x| c * x[0].sin() + 1.0).unwrap();
            let x = grid.point(i)[0];
            prop_assert!((interpolate(&u, &[x]) - u.values()[i]).abs() < 1e-12);
        }
    }
}

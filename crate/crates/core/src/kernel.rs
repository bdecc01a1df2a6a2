//! Whole-space kernels: the one-sided stable density `η^s_1` (Laplace transform `e^{−λ^s}`),
//! the Gaussian `p_r`, the fractional heat kernel `p^s_t = ∫ p_r η^s_t(dr)` and the resolvent
//! kernel `g^s_ε` of `(εI + (−Δ)^s)^{-1}`.
//!
//! `g^s_ε` has two independent evaluations: subordination (time integral of `p^s_t`) and radial
//! Fourier inversion of `1/(ε + |ξ|^{2s})` after rotating the contour onto the imaginary axis.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::quadrature::{self, NodeTable, QuadSettings, QuadratureError};
use crate::spectral::{Field, Grid, SpectralContext};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
}

fn check_order(s: f64) -> Result<(), KernelError> {
    if !(s > 0.0 && s < 1.0) {
        return Err(KernelError::Domain(format!("s = {s} must lie in (0, 1)")));
    }
    Ok(())
}

fn check_dim(d: usize) -> Result<(), KernelError> {
    if !(1..=3).contains(&d) {
        return Err(KernelError::Domain(format!("d = {d} must be 1, 2 or 3")));
    }
    Ok(())
}

/// Per-query budget and tolerance.
pub fn kernel_settings() -> QuadSettings {
    QuadSettings { abs_tol: 1e-9, rel_tol: 1e-10, max_evals: 1_000_000 }
}

// ---------------------------------------------------------------------------
// One-sided stable density

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StableMethod {
    /// Zolotarev's integral over `(0, π)`.
    Integral,
    /// Convergent expansion in `r^{−s}`.
    Series,
    /// `(4π)^{-1/2} r^{-3/2} e^{-1/(4r)}`, only for `s = 1/2`.
    ClosedForm,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StableDensity {
    pub s: f64,
    /// `None` picks the series for large `r` and the integral otherwise.
    pub method: Option<StableMethod>,
}

impl StableDensity {
    pub fn new(s: f64) -> Result<Self, KernelError> {
        check_order(s)?;
        Ok(StableDensity { s, method: None })
    }

    pub fn with_method(s: f64, method: StableMethod) -> Result<Self, KernelError> {
        check_order(s)?;
        if method == StableMethod::ClosedForm && s != 0.5 {
            return Err(KernelError::Unsupported("closed form exists only for s = 1/2".into()));
        }
        Ok(StableDensity { s, method: Some(method) })
    }

    /// `r` beyond which the series is used automatically (`r^{−s} ≤ 0.1`).
    pub fn series_threshold(&self) -> f64 {
        10f64.powf(1.0 / self.s)
    }

    pub fn density(&self, r: f64) -> Result<f64, KernelError> {
        Ok(self.log_density(r)?.exp())
    }

    pub fn log_density(&self, r: f64) -> Result<f64, KernelError> {
        if !(r > 0.0) || !r.is_finite() {
            return Err(KernelError::Domain(format!("r = {r} must be positive")));
        }
        let method = self.method.unwrap_or(if r >= self.series_threshold() { StableMethod::Series } else { StableMethod::Integral });
        match method {
            StableMethod::ClosedForm => Ok(-0.5 * (4.0 * PI).ln() - 1.5 * r.ln() - 0.25 / r),
            StableMethod::Series => Ok(series(self.s, r)?.ln()),
            StableMethod::Integral => zolotarev_log(self.s, r),
        }
    }
}

pub fn eta_density(s: f64, r: f64) -> Result<f64, KernelError> {
    StableDensity::new(s)?.density(r)
}

/// `(1/π) Σ_k (−1)^{k+1} Γ(ks+1)/k! sin(πks) r^{−ks−1}`.
fn series(s: f64, r: f64) -> Result<f64, KernelError> {
    let lr = r.ln();
    let mut sum = 0.0;
    for k in 1..200 {
        let kf = k as f64;
        let mag = ln_gamma(kf * s + 1.0) - ln_gamma(kf + 1.0) - (kf * s + 1.0) * lr;
        let term = if k % 2 == 1 { 1.0 } else { -1.0 } * (PI * kf * s).sin() * mag.exp();
        sum += term;
        if mag.exp() <= 1e-17 * sum.abs() {
            if sum <= 0.0 {
                return Err(KernelError::Domain(format!("series is not accurate at r = {r}")));
            }
            return Ok(sum / PI);
        }
    }
    Err(KernelError::Domain(format!("series did not converge at r = {r}")))
}

fn zolotarev_ln_a(s: f64, u: f64) -> f64 {
    let q = 1.0 - s;
    (s / q) * (s * u).sin().ln() + (q * u).sin().ln() - (1.0 / q) * u.sin().ln()
}

/// `ln η^s_1(r)` from `s/((1−s)π) r^{−1/(1−s)} ∫_0^π A e^{−zA} du`, `z = r^{−s/(1−s)}`.
fn zolotarev_log(s: f64, r: f64) -> Result<f64, KernelError> {
    let q = 1.0 - s;
    let ln_z = -(s / q) * r.ln();
    let a0 = (s / q) * s.ln() + q.ln();
    // Peak of A e^{−zA} sits where A = 1/z; A increases on (0, π).
    let (c_ln, split) = if -ln_z > a0 {
        let (mut lo, mut hi) = (0.0, PI);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if zolotarev_ln_a(s, mid) < -ln_z {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (-ln_z, Some(0.5 * (lo + hi)))
    } else {
        (a0, None)
    };
    let zc = (ln_z + c_ln).exp();
    // z(A − c) = zc·expm1(ln A − ln c) keeps the exponent accurate when z is huge.
    let integrand = |u: f64| {
        let la = zolotarev_ln_a(s, u);
        let expo = -zc * (la - c_ln).exp_m1();
        if !la.is_finite() || expo < -745.0 {
            0.0
        } else {
            (la + expo).exp()
        }
    };
    let mut breaks = vec![0.0];
    if let Some(u) = split {
        if u > 1e-12 && u < PI - 1e-12 {
            breaks.push(u);
        }
    }
    breaks.push(PI);
    // Rounding in ln A is amplified by zc; such densities are below e^{-zc} anyway.
    let settings = QuadSettings { abs_tol: f64::INFINITY, rel_tol: (1e-15 * zc).clamp(1e-12, 1e-6), max_evals: 200_000 };
    let res = quadrature::integrate_with_breaks(integrand, &breaks, &settings)?;
    Ok((s / (q * PI)).ln() - r.ln() / q - zc + res.value.ln())
}

// ---------------------------------------------------------------------------
// Heat kernels

/// `p_r(x) = (4πr)^{−d/2} e^{−|x|²/(4r)}` with `d = x.len()`.
pub fn heat_kernel(r_time: f64, x: &[f64]) -> f64 {
    let x2: f64 = x.iter().map(|v| v * v).sum();
    heat_kernel_radial(r_time, x2, x.len())
}

fn heat_kernel_radial(r_time: f64, x2: f64, d: usize) -> f64 {
    (4.0 * PI * r_time).powf(-0.5 * d as f64) * (-x2 / (4.0 * r_time)).exp()
}

/// Composite rule for `∫ F(ρ) η^s_1(ρ) dρ` in `v = ln ρ`, with the density folded into the weights.
#[derive(Debug, Clone)]
pub struct SubordinationTable {
    pub s: f64,
    pub rho: Vec<f64>,
    pub weights: Vec<f64>,
}

impl SubordinationTable {
    /// Shared table for order `s`, built on first use.
    pub fn get(s: f64) -> Result<Arc<SubordinationTable>, KernelError> {
        static CACHE: OnceLock<Mutex<HashMap<u64, Arc<SubordinationTable>>>> = OnceLock::new();
        check_order(s)?;
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        if let Some(t) = cache.lock().expect("kernel cache").get(&s.to_bits()) {
            return Ok(t.clone());
        }
        let table = Arc::new(Self::build(s)?);
        cache.lock().expect("kernel cache").insert(s.to_bits(), table.clone());
        Ok(table)
    }

    fn build(s: f64) -> Result<Self, KernelError> {
        let eta = StableDensity::new(s)?;
        let log_shape = |v: f64| eta.log_density(v.exp()).map(|l| l + v);
        let mut v_lo = 0.0;
        while log_shape(v_lo)? > -700.0 {
            v_lo -= 0.25;
        }
        let v_hi = (40.0 / s).max(80.0);
        let mut failure = None;
        let shape = |v: f64| match log_shape(v) {
            Ok(l) => l.exp(),
            Err(e) => {
                failure = Some(e);
                0.0
            }
        };
        let nodes = NodeTable::adapted(shape, v_lo, v_hi, 0.5, &QuadSettings { abs_tol: 1e-13, rel_tol: 1e-13, max_evals: 1_000_000 })?;
        if let Some(e) = failure {
            return Err(e);
        }
        let mut rho = Vec::with_capacity(nodes.len());
        let mut weights = Vec::with_capacity(nodes.len());
        for (&v, &w) in nodes.nodes.iter().zip(&nodes.weights) {
            let l = log_shape(v)?;
            if l > -745.0 {
                rho.push(v.exp());
                weights.push(w * l.exp());
            }
        }
        Ok(SubordinationTable { s, rho, weights })
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// `∫ p_{τρ}(x) η^s_1(dρ)` at `|x|² = x2`.
    fn subordinate(&self, tau: f64, x2: f64, d: usize) -> f64 {
        self.rho.iter().zip(&self.weights).map(|(&r, &w)| w * heat_kernel_radial(tau * r, x2, d)).sum()
    }
}

/// `p^s_t(x) = ∫ p_{t^{1/s}ρ}(x) η^s_1(dρ)` with `d = x.len()`.
pub fn fractional_heat_kernel(s: f64, t: f64, x: &[f64]) -> Result<f64, KernelError> {
    check_dim(x.len())?;
    if !(t > 0.0) {
        return Err(KernelError::Domain(format!("t = {t} must be positive")));
    }
    let table = SubordinationTable::get(s)?;
    let x2: f64 = x.iter().map(|v| v * v).sum();
    Ok(table.subordinate(t.powf(1.0 / s), x2, x.len()))
}

// ---------------------------------------------------------------------------
// Resolvent kernel

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KernelQuery {
    pub s: f64,
    pub eps: f64,
    pub d: usize,
    pub r: f64,
}

impl KernelQuery {
    pub fn validate(&self) -> Result<(), KernelError> {
        check_order(self.s)?;
        check_dim(self.d)?;
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(KernelError::Domain(format!("eps = {} must be positive", self.eps)));
        }
        if !(self.r >= 0.0 && self.r.is_finite()) {
            return Err(KernelError::Domain(format!("r = {} must be nonnegative", self.r)));
        }
        if self.r == 0.0 && (self.d as f64) >= 2.0 * self.s {
            return Err(KernelError::Domain("g is infinite at r = 0 when d >= 2s".into()));
        }
        Ok(())
    }
}

fn sorted_breaks(lo: f64, hi: f64, inner: &[f64]) -> Vec<f64> {
    let mut b = vec![lo];
    let mut mids: Vec<f64> = inner.iter().copied().filter(|&x| x > lo && x < hi).collect();
    mids.sort_by(f64::total_cmp);
    b.extend(mids);
    b.push(hi);
    b
}

/// `g^s_ε(r) = ∫_0^∞ e^{−εt} p^s_t(r) dt`, integrated in `ln t`.
pub fn resolvent_kernel_subordination(q: &KernelQuery) -> Result<f64, KernelError> {
    subordination_with(q, &kernel_settings())
}

fn subordination_with(q: &KernelQuery, settings: &QuadSettings) -> Result<f64, KernelError> {
    q.validate()?;
    let table = SubordinationTable::get(q.s)?;
    let x2 = q.r * q.r;
    let v_hi = (800.0 / q.eps).ln();
    let v_lo = if q.r > 0.0 { (1e-9 * q.r.powf(2.0 * q.s)).ln() } else { -92.0 };
    let breaks = sorted_breaks(v_lo, v_hi, &[2.0 * q.s * q.r.max(1e-300).ln(), -q.eps.ln()]);
    let f = |v: f64| {
        let t = v.exp();
        (-q.eps * t).exp() * table.subordinate(t.powf(1.0 / q.s), x2, q.d) * t
    };
    Ok(quadrature::integrate_with_breaks(f, &breaks, settings)?.value)
}

/// `K_0(z) = ∫_0^∞ e^{−z cosh t} dt`.
pub fn bessel_k0(z: f64) -> Result<f64, KernelError> {
    if !(z > 0.0) {
        return Err(KernelError::Domain(format!("K0 needs z > 0, got {z}")));
    }
    if z > 740.0 {
        return Ok(0.0);
    }
    let t_hi = (800.0 / z).max(1.0).acosh().max(1.0);
    let knee = (2.0 / z).ln();
    let breaks = sorted_breaks(0.0, t_hi, &[knee]);
    let settings = QuadSettings { abs_tol: f64::INFINITY, rel_tol: 1e-13, max_evals: 100_000 };
    Ok(quadrature::integrate_with_breaks(|t| (-z * t.cosh()).exp(), &breaks, &settings)?.value)
}

/// `g^s_ε(r) = (2π)^{−d/2} 𝓕(1/(ε + |·|^{2s}))(r)` by contour-rotated radial inversion, `r > 0`.
pub fn resolvent_kernel_fourier(q: &KernelQuery) -> Result<f64, KernelError> {
    q.validate()?;
    if q.r == 0.0 {
        return Err(KernelError::Domain("the Fourier route needs r > 0".into()));
    }
    let (s, eps, r) = (q.s, q.eps, q.r);
    let c = (PI * s).cos();
    let sin = (PI * s).sin();
    let q_of = |u: f64| {
        let a = u.powf(2.0 * s);
        eps * eps + 2.0 * eps * a * c + a * a
    };
    let knee = eps.powf(0.5 / s).ln();
    let w_lo = knee - 30.0;
    let w_hi = (800.0 / r).ln();
    let breaks = sorted_breaks(w_lo.min(w_hi - 1.0), w_hi, &[knee, -r.ln()]);
    let settings = kernel_settings();
    let value = match q.d {
        1 => {
            let f = |w: f64| {
                let u = w.exp();
                (-r * u).exp() * u.powf(2.0 * s) / q_of(u) * u
            };
            sin / PI * quadrature::integrate_with_breaks(f, &breaks, &settings)?.value
        }
        2 => {
            let mut failure = None;
            let f = |w: f64| {
                let u = w.exp();
                match bessel_k0(r * u) {
                    Ok(k) => k * u.powf(2.0 * s + 1.0) / q_of(u) * u,
                    Err(e) => {
                        failure = Some(e);
                        0.0
                    }
                }
            };
            let v = quadrature::integrate_with_breaks(f, &breaks, &settings)?.value;
            if let Some(e) = failure {
                return Err(e);
            }
            sin / (PI * PI) * v
        }
        _ => {
            let f = |w: f64| {
                let u = w.exp();
                (-r * u).exp() * u.powf(2.0 * s + 1.0) / q_of(u) * u
            };
            sin / (2.0 * PI * PI * r) * quadrature::integrate_with_breaks(f, &breaks, &settings)?.value
        }
    };
    Ok(value)
}

/// Surface measure of the unit sphere in `ℝ^d`.
pub fn sphere_area(d: usize) -> f64 {
    match d {
        1 => 2.0,
        2 => 2.0 * PI,
        _ => 4.0 * PI,
    }
}

/// `ε ∫ g^s_ε dx` by radial quadrature of the subordination route.
pub fn mass_identity(s: f64, eps: f64, d: usize) -> Result<f64, KernelError> {
    KernelQuery { s, eps, d, r: 1.0 }.validate()?;
    let scale = eps.powf(-0.5 / s);
    // Purely relative inner tolerance: the far field is weighted by r^d.
    let inner = QuadSettings { abs_tol: f64::INFINITY, rel_tol: 1e-11, max_evals: 1_000_000 };
    let mut failure = None;
    let f = |w: f64| {
        let r = w.exp();
        match subordination_with(&KernelQuery { s, eps, d, r }, &inner) {
            Ok(g) => g * r.powi(d as i32),
            Err(e) => {
                failure = Some(e);
                0.0
            }
        }
    };
    let lo = (scale * 1e-9).ln();
    let hi = (scale * 1e9).ln();
    let breaks = sorted_breaks(lo, hi, &[scale.ln()]);
    let settings = QuadSettings { abs_tol: 1e-9, rel_tol: 1e-9, max_evals: 5_000 };
    let v = quadrature::integrate_with_breaks(f, &breaks, &settings)?.value;
    if let Some(e) = failure {
        return Err(e);
    }
    // Far tail: g_ε(r) ≈ c r^{−d−2s} with c from the last node.
    let r_hi = hi.exp();
    let g_hi = subordination_with(&KernelQuery { s, eps, d, r: r_hi }, &inner)?;
    let tail = g_hi * r_hi.powi(d as i32) / (2.0 * s);
    Ok(eps * sphere_area(d) * (v + tail))
}

// ---------------------------------------------------------------------------
// Convolution route to Φ_ε

/// `g^s_1` on a logarithmic radius grid, interpolated cubically in `(ln r, ln g)`.
struct RadialTable {
    ln_r0: f64,
    step: f64,
    ln_g: Vec<f64>,
}

impl RadialTable {
    fn build(s: f64, d: usize, r_min: f64, r_max: f64) -> Result<Self, KernelError> {
        let per_unit = 16.0;
        let ln_r0 = r_min.ln();
        let count = ((r_max.ln() - ln_r0) * per_unit).ceil() as usize + 4;
        let step = 1.0 / per_unit;
        let ln_g = (0..count)
            .map(|i| {
                let r = (ln_r0 + step * i as f64).exp();
                resolvent_kernel_fourier(&KernelQuery { s, eps: 1.0, d, r }).map(|g| g.ln())
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(RadialTable { ln_r0, step, ln_g })
    }

    fn eval(&self, r: f64) -> f64 {
        let x = (r.ln() - self.ln_r0) / self.step;
        let n = self.ln_g.len();
        if x <= 0.0 {
            let slope = self.ln_g[1] - self.ln_g[0];
            return (self.ln_g[0] + slope * x).exp();
        }
        if x >= (n - 1) as f64 {
            let slope = self.ln_g[n - 1] - self.ln_g[n - 2];
            return (self.ln_g[n - 1] + slope * (x - (n - 1) as f64)).exp();
        }
        let i = (x.floor() as usize).clamp(1, n - 3);
        let t = x - i as f64;
        let (p0, p1, p2, p3) = (self.ln_g[i - 1], self.ln_g[i], self.ln_g[i + 1], self.ln_g[i + 2]);
        // Catmull–Rom
        let v = p1
            + 0.5 * t * (p2 - p0 + t * (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3 + t * (3.0 * (p1 - p2) + p3 - p0)));
        v.exp()
    }
}

const IMAGES: i64 = 3;

/// `Φ_ε f = g^s_ε ∗ f` on the periodic box by direct kernel quadrature (`d ≤ 2`).
///
/// Cell-averaged kernel weights over `±3` periodic images; the remaining far field is
/// approximated by `mean(f)·(1/ε − Σ weights)`.
pub fn phi_epsilon_offgrid(f: &Field, eps: f64, s: f64) -> Result<Field, KernelError> {
    check_order(s)?;
    let grid = *f.grid();
    let d = grid.dim;
    if d > 2 {
        return Err(KernelError::Unsupported("direct convolution is implemented for d <= 2".into()));
    }
    if !(eps > 0.0) {
        return Err(KernelError::Domain(format!("eps = {eps} must be positive")));
    }
    let a = eps.powf(0.5 / s);
    let pref = eps.powf((d as f64 - 2.0 * s) / (2.0 * s));
    let dx = grid.dx();
    let reach = 2.0 * grid.half_width * (IMAGES as f64 + 1.0) * (d as f64).sqrt();
    let table = RadialTable::build(s, d, 1e-3 * dx * a, 1.2 * reach * a)?;
    let g = |r: f64| pref * table.eval(a * r);
    let n = grid.n as i64;
    let h = 0.5 * dx;
    let near = quadrature::QuadSettings { abs_tol: 1e-14, rel_tol: 1e-11, max_evals: 200_000 };
    let gl = [(-(0.6f64).sqrt(), 5.0 / 9.0), (0.0, 8.0 / 9.0), ((0.6f64).sqrt(), 5.0 / 9.0)];
    let mut weights = vec![0.0; grid.len()];
    let mut total = 0.0;
    for flat in 0..grid.len() {
        let idx = grid.multi_index(flat);
        let m: Vec<i64> = (0..d).map(|ax| grid.wavenumber(idx[ax])).collect();
        let mut w = 0.0;
        let images: Vec<Vec<i64>> = if d == 1 {
            (-IMAGES..=IMAGES).map(|j| vec![j]).collect()
        } else {
            (-IMAGES..=IMAGES).flat_map(|j| (-IMAGES..=IMAGES).map(move |k| vec![j, k])).collect()
        };
        for img in images {
            let cell: Vec<i64> = m.iter().zip(&img).map(|(mi, ji)| mi + ji * n).collect();
            let c: Vec<f64> = cell.iter().map(|&k| k as f64 * dx).collect();
            let dist = cell.iter().map(|k| k.abs()).max().unwrap_or(0);
            w += if d == 1 {
                if dist == 0 {
                    2.0 * quadrature::integrate_log(g, 1e-14 * h, h, &near)?.value
                } else if dist <= 3 {
                    quadrature::integrate(|x| g(x.abs()), c[0] - h, c[0] + h, &near)?.value
                } else {
                    gl.iter().map(|(x, wt)| wt * g((c[0] + h * x).abs())).sum::<f64>() * h
                }
            } else if dist == 0 {
                // Polar coordinates: eight copies of the wedge 0 ≤ θ ≤ π/4.
                let mut failure = None;
                let wedge = quadrature::integrate(
                    |th| match quadrature::integrate_log(|r| g(r) * r, 1e-14 * h, h / th.cos(), &near) {
                        Ok(v) => v.value,
                        Err(e) => {
                            failure = Some(e);
                            0.0
                        }
                    },
                    0.0,
                    PI / 4.0,
                    &near,
                )?
                .value;
                if let Some(e) = failure {
                    return Err(e.into());
                }
                8.0 * wedge
            } else if dist <= 2 {
                let mut failure = None;
                let v = quadrature::integrate(
                    |y| match quadrature::integrate(|x| g(x.hypot(y)), c[0] - h, c[0] + h, &near) {
                        Ok(v) => v.value,
                        Err(e) => {
                            failure = Some(e);
                            0.0
                        }
                    },
                    c[1] - h,
                    c[1] + h,
                    &near,
                )?
                .value;
                if let Some(e) = failure {
                    return Err(e.into());
                }
                v
            } else {
                let mut acc = 0.0;
                for (x, wx) in &gl {
                    for (y, wy) in &gl {
                        acc += wx * wy * g((c[0] + h * x).hypot(c[1] + h * y));
                    }
                }
                acc * h * h
            };
        }
        weights[flat] = w;
        total += w;
    }
    let tail = 1.0 / eps - total;
    let ctx = SpectralContext::get(&grid);
    let mut fw = ctx.dft(&weights);
    let ff = ctx.dft(f.values());
    for (a, b) in fw.iter_mut().zip(&ff) {
        *a *= b;
    }
    let conv = ctx.idft_real(fw);
    let mean = f.mass() / grid.volume();
    Field::new(grid, conv.into_iter().map(|v| v + mean * tail).collect()).map_err(|e| KernelError::Domain(e.to_string()))
}

/// Rows `(r, g_subordination, g_fourier)` for tabulation.
pub fn kernel_table(s: f64, eps: f64, d: usize, radii: &[f64]) -> Result<Vec<(f64, f64, f64)>, KernelError> {
    radii
        .iter()
        .map(|&r| {
            let q = KernelQuery { s, eps, d, r };
            Ok((r, resolvent_kernel_subordination(&q)?, resolvent_kernel_fourier(&q)?))
        })
        .collect()
}

/// Grid used by [`phi_epsilon_offgrid`] cross-checks in tests and the harness.
pub fn offgrid_check_grid(dim: usize) -> Grid {
    if dim == 1 {
        Grid::new(1, 128, 8.0).expect("valid grid")
    } else {
        Grid::new(dim, 128, 4.0).expect("valid grid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn half_order_matches_closed_form() {
        let integral = StableDensity::with_method(0.5, StableMethod::Integral).unwrap();
        let closed = StableDensity::with_method(0.5, StableMethod::ClosedForm).unwrap();
        let auto = StableDensity::new(0.5).unwrap();
        for i in 0..=60 {
            let r = 0.05 * (400.0f64).powf(i as f64 / 60.0);
            let c = closed.density(r).unwrap();
            assert!(rel(integral.density(r).unwrap(), c) < 1e-8, "r = {r}");
            assert!(rel(auto.density(r).unwrap(), c) < 1e-8, "r = {r}");
        }
    }

    #[test]
    fn series_and_integral_agree_at_the_switch() {
        for &s in &[0.55, 0.6, 0.75, 0.9, 0.95] {
            let r = StableDensity::new(s).unwrap().series_threshold();
            let a = StableDensity::with_method(s, StableMethod::Integral).unwrap().density(r).unwrap();
            let b = StableDensity::with_method(s, StableMethod::Series).unwrap().density(r).unwrap();
            assert!(rel(a, b) < 1e-10, "s = {s}: {a} vs {b}");
        }
    }

    /// `∫_0^R e^{−λr}η dr` by quadrature plus the series integrated termwise over `(R, ∞)` for `λ = 0`.
    fn laplace(s: f64, lambda: f64) -> f64 {
        let eta = StableDensity::new(s).unwrap();
        let big: f64 = 1e6;
        let settings = QuadSettings { abs_tol: 1e-13, rel_tol: 1e-12, max_evals: 1_000_000 };
        let body = quadrature::integrate_with_breaks(
            |v: f64| {
                let r = v.exp();
                (-lambda * r).exp() * eta.density(r).unwrap() * r
            },
            &[(1e-4f64).ln(), 0.0, big.ln()],
            &settings,
        )
        .unwrap()
        .value;
        if lambda > 0.0 {
            return body;
        }
        let mut tail = 0.0;
        for k in 1..60 {
            let kf = k as f64;
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            tail += sign * (ln_gamma(kf * s + 1.0) - ln_gamma(kf + 1.0)).exp() * (PI * kf * s).sin() * big.powf(-kf * s) / (kf * s);
        }
        body + tail / PI
    }

    #[test]
    fn normalization_and_laplace_transform() {
        for &s in &[0.6, 0.75, 0.9] {
            assert!((laplace(s, 0.0) - 1.0).abs() < 1e-8, "s = {s}");
            for &l in &[0.5, 1.0, 2.0] {
                let v = laplace(s, l);
                assert!((v - (-(l as f64).powf(s)).exp()).abs() < 1e-6, "s = {s}, λ = {l}");
            }
        }
    }

    #[test]
    fn density_rejects_nonpositive_r() {
        assert!(matches!(eta_density(0.7, 0.0), Err(KernelError::Domain(_))));
        assert!(matches!(StableDensity::with_method(0.7, StableMethod::ClosedForm), Err(KernelError::Unsupported(_))));
    }

    #[test]
    fn heat_kernel_basics() {
        for d in 1..=3 {
            let x0 = vec![0.0; d];
            assert!(rel(heat_kernel(0.3, &x0), (4.0 * PI * 0.3f64).powf(-(d as f64) / 2.0)) < 1e-15);
            let x: Vec<f64> = (0..d).map(|i| 0.3 + i as f64).collect();
            let mx: Vec<f64> = x.iter().map(|v| -v).collect();
            assert_eq!(heat_kernel(0.7, &x), heat_kernel(0.7, &mx));
        }
        // Chapman–Kolmogorov at x = 0 in d = 1
        let (a, b) = (0.3, 0.5);
        let v = quadrature::integrate(|y| heat_kernel(a, &[y]) * heat_kernel(b, &[-y]), -30.0, 30.0, &QuadSettings::new(1e-14, 1e-13)).unwrap().value;
        assert!((v - heat_kernel(a + b, &[0.0])).abs() < 1e-8);
    }

    #[test]
    fn subordination_table_is_normalized() {
        for &s in &[0.5, 0.6, 0.75, 0.95] {
            let t = SubordinationTable::get(s).unwrap();
            assert!((t.total_weight() - 1.0).abs() < 1e-9, "s = {s}: {}", t.total_weight());
        }
    }

    #[test]
    fn cauchy_kernel_at_half_order() {
        for &t in &[0.3, 1.0, 2.0] {
            for i in 0..=40 {
                let x = -10.0 + 0.5 * i as f64;
                let v = fractional_heat_kernel(0.5, t, &[x]).unwrap();
                let c = t / (PI * (t * t + x * x));
                assert!(rel(v, c) < 1e-6, "t = {t}, x = {x}: {v} vs {c}");
            }
        }
    }

    #[test]
    fn fractional_heat_kernel_mass_and_fourier() {
        let settings = QuadSettings { abs_tol: 1e-12, rel_tol: 1e-12, max_evals: 1_000_000 };
        for &s in &[0.6, 0.75] {
            let t = 0.7;
            let p = |x: f64| fractional_heat_kernel(s, t, &[x]).unwrap();
            // Tail beyond X from p ≈ t sin(πs)Γ(2s+1)/π |x|^{−1−2s}.
            let x_hi: f64 = 2000.0;
            let c = t * (PI * s).sin() * ln_gamma(2.0 * s + 1.0).exp() / PI;
            let tail = 2.0 * c * x_hi.powf(-2.0 * s) / (2.0 * s);
            let mass = 2.0 * quadrature::integrate_with_breaks(p, &[0.0, 1.0, 10.0, 100.0, x_hi], &settings).unwrap().value + tail;
            assert!((mass - 1.0).abs() < 1e-7, "s = {s}: mass {mass}");
            for &xi in &[0.5, 1.0, 2.0] {
                let ft = 2.0
                    * quadrature::integrate_with_breaks(|x| p(x) * (xi * x).cos(), &[0.0, 1.0, 10.0, 100.0, x_hi], &settings).unwrap().value;
                assert!((ft - (-t * xi.powf(2.0 * s)).exp()).abs() < 1e-5, "s = {s}, ξ = {xi}");
            }
        }
    }

    #[test]
    fn routes_agree() {
        for &d in &[1usize, 2] {
            for &s in &[0.6, 0.75] {
                for &eps in &[0.5, 1.0] {
                    for &r in &[0.5, 1.0, 2.0] {
                        let q = KernelQuery { s, eps, d, r };
                        let a = resolvent_kernel_subordination(&q).unwrap();
                        let b = resolvent_kernel_fourier(&q).unwrap();
                        assert!(rel(a, b) <= 1e-4, "{q:?}: {a} vs {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn scaling_law() {
        for &d in &[1usize, 2, 3] {
            for &s in &[0.6, 0.8] {
                for &eps in &[0.3, 2.0] {
                    for &r in &[0.4, 1.5] {
                        let lhs = resolvent_kernel_subordination(&KernelQuery { s, eps, d, r }).unwrap();
                        let g1 = resolvent_kernel_subordination(&KernelQuery { s, eps: 1.0, d, r: eps.powf(0.5 / s) * r }).unwrap();
                        let rhs = eps.powf((d as f64 - 2.0 * s) / (2.0 * s)) * g1;
                        assert!(rel(lhs, rhs) < 1e-6, "d={d} s={s} eps={eps} r={r}");
                    }
                }
            }
        }
    }

    #[test]
    fn mass_identity_holds() {
        for &(s, eps, d) in &[(0.75, 1.0, 1usize), (0.6, 0.5, 2)] {
            let m = mass_identity(s, eps, d).unwrap();
            assert!((m - 1.0).abs() < 1e-6, "s={s} eps={eps} d={d}: {m}");
        }
    }

    #[test]
    fn bessel_k0_reference_values() {
        for &(z, v) in &[(1.0, 0.42102443824070823), (0.1, 2.4270690247020164), (5.0, 0.0036910983340425942), (1e-3, 7.0236888005623825)] {
            assert!(rel(bessel_k0(z).unwrap(), v) < 1e-11);
        }
    }

    #[test]
    fn near_origin_and_far_behavior() {
        // 2s < d: g r^{d−2s} settles to a constant.
        let (s, d) = (0.75, 2);
        let vals: Vec<f64> = [0.1, 0.05, 0.025]
            .iter()
            .map(|&r| resolvent_kernel_subordination(&KernelQuery { s, eps: 1.0, d, r }).unwrap() * r.powf(d as f64 - 2.0 * s))
            .collect();
        assert!(vals.iter().all(|v| *v > 0.0));
        assert!((vals[2] - vals[1]).abs() < (vals[1] - vals[0]).abs());
        // positivity and monotone decay on a log grid
        for &d in &[1usize, 2, 3] {
            let mut prev = f64::INFINITY;
            for i in 0..20 {
                let r = 0.05 * (1.4f64).powi(i);
                let g = resolvent_kernel_subordination(&KernelQuery { s: 0.7, eps: 1.0, d, r }).unwrap();
                assert!(g > 0.0 && g < prev && g.is_finite());
                prev = g;
            }
        }
    }

    #[test]
    fn yukawa_limit() {
        for &r in &[0.5, 0.75, 1.0, 1.5] {
            let g = resolvent_kernel_fourier(&KernelQuery { s: 0.95, eps: 1.0, d: 3, r }).unwrap();
            let y = (-r).exp() / (4.0 * PI * r);
            assert!(rel(g, y) < 0.05, "r = {r}: {g} vs {y}");
        }
    }

    #[test]
    fn offgrid_convolution_matches_spectral_phi() {
        for dim in [1usize, 2] {
            let grid = offgrid_check_grid(dim);
            let f = Field::from_fn(grid, |x| (-(x[..dim].iter().map(|v| v * v).sum::<f64>())).exp()).unwrap();
            let (eps, s) = (0.5, 0.75);
            let direct = phi_epsilon_offgrid(&f, eps, s).unwrap();
            let spec = spectral::bessel_resolvent_phi(&f, eps, s).unwrap();
            let err = direct.values().iter().zip(spec.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-3 * spec.linf(), "d = {dim}: {err:e}");
            // constant field maps to c/ε
            let c = phi_epsilon_offgrid(&Field::constant(grid, 0.7), eps, s).unwrap();
            assert!(c.values().iter().all(|v| (v - 0.7 / eps).abs() < 1e-9));
            // linearity
            let g = f.map(|v| v * v);
            let lhs = phi_epsilon_offgrid(&f.lincomb(2.0, &g, -0.5), eps, s).unwrap();
            let rhs = direct.lincomb(2.0, &phi_epsilon_offgrid(&g, eps, s).unwrap(), -0.5);
            assert!(lhs.l1_distance(&rhs) < 1e-10);
        }
        assert!(matches!(phi_epsilon_offgrid(&Field::zeros(Grid::new(3, 8, 1.0).unwrap()), 1.0, 0.7), Err(KernelError::Unsupported(_))));
    }
}

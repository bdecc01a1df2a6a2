//! Uniqueness gauge `h_ε(t) = (Φ_ε z_ε(t), z_ε(t))_2` for a pair of paths, with
//! `z = y1 − y2`, `z_ε` its mollification and `Φ_ε = (εI + (−Δ)^s)^{-1}`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coefficients::{self, CoefficientSet};
use crate::evolution::SolutionPath;
use crate::spectral::{Field, SpectralContext};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GaugeError {
    #[error("paths live on different grids")]
    GridMismatch,
    #[error("snapshot times differ at index {index}: {t1} vs {t2}")]
    TimeMismatch { index: usize, t1: f64, t2: f64 },
    #[error("time {0} is not a snapshot time")]
    UnknownTime(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Two candidate solutions on a common grid and snapshot set.
#[derive(Debug, Clone)]
pub struct GaugePair<'a> {
    pub y1: &'a SolutionPath,
    pub y2: &'a SolutionPath,
    /// Mollifier width; 0 disables mollification.
    pub eps_m: f64,
    pub eps_g: f64,
    pub cs: &'a CoefficientSet,
    /// Truncation level `N ≥ max(|y1|_∞, |y2|_∞)`.
    pub n_trunc: f64,
}

impl<'a> GaugePair<'a> {
    /// Mollifier width defaults to `2 dx`.
    pub fn new(y1: &'a SolutionPath, y2: &'a SolutionPath, eps_g: f64, cs: &'a CoefficientSet) -> Result<Self, GaugeError> {
        if y1.grid() != y2.grid() {
            return Err(GaugeError::GridMismatch);
        }
        if y1.times.len() != y2.times.len() {
            return Err(GaugeError::TimeMismatch { index: y1.times.len().min(y2.times.len()), t1: y1.final_time(), t2: y2.final_time() });
        }
        for (i, (a, b)) in y1.times.iter().zip(&y2.times).enumerate() {
            if (a - b).abs() > 1e-9 * (1.0 + a.abs()) {
                return Err(GaugeError::TimeMismatch { index: i, t1: *a, t2: *b });
            }
        }
        if !(eps_g > 0.0) {
            return Err(GaugeError::InvalidParameter(format!("eps_g = {eps_g} must be positive")));
        }
        let n_trunc = y1.fields.iter().chain(&y2.fields).map(|f| f.linf()).fold(0.0, f64::max).max(1e-12);
        Ok(GaugePair { y1, y2, eps_m: 2.0 * y1.grid().dx(), eps_g, cs, n_trunc })
    }

    pub fn with_mollifier(mut self, eps_m: f64) -> Result<Self, GaugeError> {
        if !(eps_m >= 0.0) {
            return Err(GaugeError::InvalidParameter(format!("eps_m = {eps_m} must be nonnegative")));
        }
        self.eps_m = eps_m;
        Ok(self)
    }

    fn index_of(&self, t: f64) -> Result<usize, GaugeError> {
        self.y1.times.iter().position(|&s| (s - t).abs() <= 1e-9 * (1.0 + t.abs())).ok_or(GaugeError::UnknownTime(t))
    }

    fn mollifier_table(&self) -> Vec<f64> {
        let g = *self.y1.grid();
        if self.eps_m == 0.0 {
            return vec![1.0; g.len()];
        }
        let axis: Vec<f64> = (0..g.n).map(|j| coefficients::mollifier_fourier(self.eps_m * g.wavenumber(j) as f64 * g.dxi())).collect();
        (0..g.len())
            .map(|flat| {
                let idx = g.multi_index(flat);
                (0..g.dim).map(|a| axis[idx[a]]).product()
            })
            .collect()
    }

    fn mollify(&self, f: &Field) -> Field {
        if self.eps_m == 0.0 {
            return f.clone();
        }
        let ctx = SpectralContext::get(f.grid());
        Field::new(*f.grid(), ctx.filter(f.values(), &self.mollifier_table())).expect("finite")
    }

    fn phi_multiplier(&self) -> Vec<f64> {
        let ctx = SpectralContext::get(self.y1.grid());
        let (eps, s) = (self.eps_g, self.cs.s);
        ctx.radial_table(|k2| 1.0 / (eps + k2.powf(s)))
    }
}

/// `(z, w) = (y1 − y2, β_N(y1) − β_N(y2))` at snapshot time `t`.
pub fn compute_z_w(pair: &GaugePair<'_>, t: f64) -> Result<(Field, Field), GaugeError> {
    let i = pair.index_of(t)?;
    let beta = coefficients::truncate(&pair.cs.beta, pair.n_trunc).map_err(|e| GaugeError::InvalidParameter(e.to_string()))?;
    let (a, b) = (&pair.y1.fields[i], &pair.y2.fields[i]);
    let z = a.lincomb(1.0, b, -1.0);
    let w = Field::new(*a.grid(), a.values().iter().zip(b.values()).map(|(&p, &q)| beta.eval(p) - beta.eval(q)).collect())
        .expect("finite");
    Ok((z, w))
}

/// `h` of a single field `z`: `(inner product, spectral integral)`.
pub fn gauge_h_of(pair: &GaugePair<'_>, z: &Field) -> (f64, f64) {
    let ze = pair.mollify(z);
    let ctx = SpectralContext::get(z.grid());
    let mult = pair.phi_multiplier();
    let phi = Field::new(*z.grid(), ctx.filter(ze.values(), &mult)).expect("finite");
    (phi.inner(&ze), ctx.weighted_energy(ze.values(), &mult))
}

/// `h_ε(t)` by the inner product and by the spectral integral.
pub fn gauge_h(pair: &GaugePair<'_>, t: f64) -> Result<(f64, f64), GaugeError> {
    let (z, _) = compute_z_w(pair, t)?;
    Ok(gauge_h_of(pair, &z))
}

/// `(ε|Φ_ε z_ε|²_2, |(−Δ)^{s/2} Φ_ε z_ε|²_2)`; the sum is `h_ε`.
pub fn gauge_decomposition_of(pair: &GaugePair<'_>, z: &Field) -> (f64, f64) {
    let ze = pair.mollify(z);
    let ctx = SpectralContext::get(z.grid());
    let phi = Field::new(*z.grid(), ctx.filter(ze.values(), &pair.phi_multiplier())).expect("finite");
    let s = pair.cs.s;
    let frac = ctx.radial_table(|k2| if k2 == 0.0 { 0.0 } else { k2.powf(s) });
    (pair.eps_g * phi.inner(&phi), ctx.weighted_energy(phi.values(), &frac))
}

pub fn gauge_decomposition(pair: &GaugePair<'_>, t: f64) -> Result<(f64, f64), GaugeError> {
    let (z, _) = compute_z_w(pair, t)?;
    Ok(gauge_decomposition_of(pair, &z))
}

/// Constants of the truncated coefficients: `α1 = sup|b*'|/β'`, `α2 = inf β'`, `α3 = 1/sup β'`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationConstants {
    pub n: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
}

pub fn truncation_constants(cs: &CoefficientSet, n: f64) -> Result<TruncationConstants, GaugeError> {
    let map = |e: coefficients::CoefficientError| GaugeError::InvalidParameter(e.to_string());
    let beta = coefficients::truncate(&cs.beta, n).map_err(map)?;
    let b = coefficients::truncate(&cs.b, n).map_err(map)?;
    // Outside [-N, N] both are affine, so probing slightly beyond covers the whole line.
    let probes = coefficients::probe_grid(1.05 * n, 2001);
    let (mut a1, mut lo, mut hi) = (0.0f64, f64::INFINITY, 0.0f64);
    for &r in &probes {
        let bp = beta.derivative(r);
        let bstar = b.derivative(r) * r + b.eval(r);
        lo = lo.min(bp);
        hi = hi.max(bp);
        a1 = a1.max(if bp > 0.0 { bstar.abs() / bp } else if bstar == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok(TruncationConstants { n, alpha1: a1, alpha2: lo, alpha3: if hi > 0.0 { 1.0 / hi } else { f64::INFINITY } })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Same,
    Different,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaugeReport {
    pub times: Vec<f64>,
    pub h_trace: Vec<f64>,
    pub h_spectral_trace: Vec<f64>,
    /// Largest `|h_inner − h_spectral| / max(|h|, tiny)`.
    pub route_defect: f64,
    pub eps_l2_trace: Vec<f64>,
    pub hs_trace: Vec<f64>,
    /// `η e^{Ct}` with the audited `C`.
    pub eta_proxy: Vec<f64>,
    pub eta: f64,
    pub gronwall_c: f64,
    /// `h_k ≤ η + C ∫_0^{t_k} h` held at every snapshot.
    pub gronwall_consistent: bool,
    pub tol: f64,
    pub verdict: Verdict,
    pub constants: TruncationConstants,
    pub eps_g: f64,
    pub eps_m: f64,
}

/// Gauge over all snapshots, Gronwall fit and verdict.
///
/// `η = h(0) + tol`; `C` is the smallest constant with `h_k ≤ η + C ∫_0^{t_k} h`.
/// The verdict is `SAME` iff `h(0) ≤ tol` and every `h_k ≤ η e^{C t_k}` stays below `tol`.
pub fn gronwall_audit(pair: &GaugePair<'_>, tol: f64) -> Result<GaugeReport, GaugeError> {
    let times = pair.y1.times.clone();
    let mut h_trace = Vec::with_capacity(times.len());
    let mut h_spec = Vec::with_capacity(times.len());
    let mut eps_l2 = Vec::with_capacity(times.len());
    let mut hs = Vec::with_capacity(times.len());
    let mut defect = 0.0f64;
    for &t in &times {
        let (z, _) = compute_z_w(pair, t)?;
        let (a, b) = gauge_h_of(pair, &z);
        let (e, f) = gauge_decomposition_of(pair, &z);
        let scale = a.abs().max(b.abs()).max(1e-300);
        defect = defect.max((a - b).abs() / scale);
        h_trace.push(a);
        h_spec.push(b);
        eps_l2.push(e);
        hs.push(f);
    }
    let eta = h_trace[0].max(0.0) + tol;
    let mut integral = vec![0.0; times.len()];
    for k in 1..times.len() {
        integral[k] = integral[k - 1] + 0.5 * (h_trace[k] + h_trace[k - 1]) * (times[k] - times[k - 1]);
    }
    let c = (1..times.len())
        .filter(|&k| integral[k] > 0.0)
        .map(|k| (h_trace[k] - eta) / integral[k])
        .fold(0.0f64, f64::max);
    let consistent = (0..times.len()).all(|k| h_trace[k] <= eta + c * integral[k] * (1.0 + 1e-12) + 1e-300);
    let eta_proxy: Vec<f64> = times.iter().map(|t| eta * (c * t).exp()).collect();
    let max_h = h_trace.iter().copied().fold(0.0f64, f64::max);
    let same = h_trace[0] <= tol && max_h <= tol;
    Ok(GaugeReport {
        times,
        h_trace,
        h_spectral_trace: h_spec,
        route_defect: defect,
        eps_l2_trace: eps_l2,
        hs_trace: hs,
        eta_proxy,
        eta,
        gronwall_c: c,
        gronwall_consistent: consistent,
        tol,
        verdict: if same { Verdict::Same } else { Verdict::Different },
        constants: truncation_constants(pair.cs, pair.n_trunc)?,
        eps_g: pair.eps_g,
        eps_m: pair.eps_m,
    })
}

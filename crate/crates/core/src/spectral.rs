//! Pseudospectral engine on the periodic box `[-L, L)^d`.
//!
//! Public transforms use the symmetric convention
//! `F(ξ) = (2π)^{-d/2} ∫ e^{i x·ξ} u(x) dx`, discretized with weight `dx^d`.
//! Frequencies are `ξ_k = (π/L) k` with `k ∈ [-n/2, n/2)`; coefficients are
//! stored in FFT order (index `j` holds `k = j` for `j < n/2`, else `j - n`).
//!
//! Multiplier operators go through [`SpectralContext`], which caches FFT plans
//! and wavenumbers per grid and works on raw value slices.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::rc::Rc;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("grids differ")]
    GridMismatch,
    #[error("spectrum is not Hermitian: relative imaginary residue {0:e}")]
    NonHermitianSpectrum(f64),
    #[error("inverse of a singular multiplier applied to a field with mass {0:e}")]
    SingularInverse(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dim: usize,
    pub n: usize,
    pub half_width: f64,
}

impl Grid {
    pub fn new(dim: usize, n: usize, half_width: f64) -> Result<Self, SpectralError> {
        if !(1..=3).contains(&dim) {
            return Err(SpectralError::InvalidGrid(format!("dimension {dim} not in 1..=3")));
        }
        if n < 8 || !n.is_power_of_two() {
            return Err(SpectralError::InvalidGrid(format!("points per axis {n} must be a power of two >= 8")));
        }
        if !(half_width > 0.0 && half_width.is_finite()) {
            return Err(SpectralError::InvalidGrid(format!("half width {half_width} must be positive")));
        }
        Ok(Grid { dim, n, half_width })
    }

    pub fn dx(&self) -> f64 {
        2.0 * self.half_width / self.n as f64
    }

    /// Quadrature weight `dx^d` of one grid cell.
    pub fn cell_volume(&self) -> f64 {
        self.dx().powi(self.dim as i32)
    }

    /// Spacing `π/L` of the dual lattice.
    pub fn dxi(&self) -> f64 {
        PI / self.half_width
    }

    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn volume(&self) -> f64 {
        (2.0 * self.half_width).powi(self.dim as i32)
    }

    /// Per-axis indices of a flat row-major index (last axis fastest).
    pub fn multi_index(&self, mut flat: usize) -> [usize; 3] {
        let mut idx = [0usize; 3];
        for a in (0..self.dim).rev() {
            idx[a] = flat % self.n;
            flat /= self.n;
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx[..self.dim].iter().fold(0, |acc, &i| acc * self.n + i)
    }

    /// Coordinates of grid point `flat`; unused axes are zero.
    pub fn point(&self, flat: usize) -> [f64; 3] {
        let idx = self.multi_index(flat);
        let mut x = [0.0; 3];
        for a in 0..self.dim {
            x[a] = -self.half_width + idx[a] as f64 * self.dx();
        }
        x
    }

    /// Signed wavenumber for FFT index `j`.
    pub fn wavenumber(&self, j: usize) -> i64 {
        if j < self.n / 2 {
            j as i64
        } else {
            j as i64 - self.n as i64
        }
    }

    /// Largest `|ξ|²` on the dual lattice.
    pub fn xi_max_sq(&self) -> f64 {
        let k = (self.n / 2) as f64 * self.dxi();
        self.dim as f64 * k * k
    }

    /// Wraps a coordinate into `[-L, L)`.
    pub fn wrap(&self, x: f64) -> f64 {
        let l = self.half_width;
        let y = (x + l).rem_euclid(2.0 * l) - l;
        if y >= l {
            -l
        } else {
            y
        }
    }
}

/// A real field sampled on a [`Grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: Grid,
    values: Vec<f64>,
}

impl Field {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self, SpectralError> {
        if values.len() != grid.len() {
            return Err(SpectralError::LengthMismatch { expected: grid.len(), got: values.len() });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(SpectralError::NonFinite(i));
        }
        Ok(Field { grid, values })
    }

    /// Construction for values known to be finite (outputs of spectral filters on finite input).
    pub(crate) fn from_raw(grid: Grid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Field { grid, values }
    }

    pub fn zeros(grid: Grid) -> Self {
        Field { grid, values: vec![0.0; grid.len()] }
    }

    pub fn constant(grid: Grid, c: f64) -> Self {
        Field { grid, values: vec![c; grid.len()] }
    }

    pub fn from_fn<F: Fn(&[f64]) -> f64>(grid: Grid, f: F) -> Result<Self, SpectralError> {
        let values = (0..grid.len()).map(|i| f(&grid.point(i)[..grid.dim])).collect();
        Field::new(grid, values)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn map<F: Fn(f64) -> f64>(&self, f: F) -> Field {
        Field::from_raw(self.grid, self.values.iter().map(|&v| f(v)).collect())
    }

    /// `a·self + b·other`.
    pub fn lincomb(&self, a: f64, other: &Field, b: f64) -> Field {
        assert_eq!(self.grid, other.grid, "grid mismatch");
        let v = self.values.iter().zip(&other.values).map(|(x, y)| a * x + b * y).collect();
        Field::from_raw(self.grid, v)
    }

    pub fn scaled(&self, a: f64) -> Field {
        self.map(|v| a * v)
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn l1(&self) -> f64 {
        l1(&self.values, &self.grid)
    }

    pub fn l2(&self) -> f64 {
        (self.values.iter().map(|v| v * v).sum::<f64>() * self.grid.cell_volume()).sqrt()
    }

    pub fn linf(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn l1_distance(&self, other: &Field) -> f64 {
        assert_eq!(self.grid, other.grid, "grid mismatch");
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).sum::<f64>() * self.grid.cell_volume()
    }

    /// `∫ f g dx` by the grid rule.
    pub fn inner(&self, other: &Field) -> f64 {
        assert_eq!(self.grid, other.grid, "grid mismatch");
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum::<f64>() * self.grid.cell_volume()
    }
}

pub(crate) fn l1(values: &[f64], grid: &Grid) -> f64 {
    values.iter().map(|v| v.abs()).sum::<f64>() * grid.cell_volume()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub grid: Grid,
    pub coefficients: Vec<Complex64>,
}

impl Spectrum {
    pub fn zeros(grid: Grid) -> Self {
        Spectrum { grid, coefficients: vec![Complex64::new(0.0, 0.0); grid.len()] }
    }

    /// Flat index of the mode with signed wavenumbers `k`.
    pub fn mode_index(&self, k: &[i64]) -> usize {
        let n = self.grid.n as i64;
        let idx: Vec<usize> = k.iter().map(|&ki| ki.rem_euclid(n) as usize).collect();
        self.grid.flat_index(&idx)
    }

    /// `max |F(ξ) - conj F(-ξ)|` relative to `max |F|`.
    pub fn hermitian_defect(&self) -> f64 {
        let g = &self.grid;
        let scale = self.coefficients.iter().fold(0.0f64, |m, c| m.max(c.norm()));
        if scale == 0.0 {
            return 0.0;
        }
        let mut worst = 0.0f64;
        for (flat, c) in self.coefficients.iter().enumerate() {
            let idx = g.multi_index(flat);
            let mut neg = [0usize; 3];
            for a in 0..g.dim {
                neg[a] = (g.n - idx[a]) % g.n;
            }
            let partner = self.coefficients[g.flat_index(&neg)];
            worst = worst.max((c - partner.conj()).norm());
        }
        worst / scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    grid: Grid,
    components: Vec<Vec<f64>>,
}

impl VectorField {
    pub fn new(grid: Grid, components: Vec<Vec<f64>>) -> Result<Self, SpectralError> {
        if components.len() != grid.dim {
            return Err(SpectralError::LengthMismatch { expected: grid.dim, got: components.len() });
        }
        for c in &components {
            if c.len() != grid.len() {
                return Err(SpectralError::LengthMismatch { expected: grid.len(), got: c.len() });
            }
            if let Some(i) = c.iter().position(|v| !v.is_finite()) {
                return Err(SpectralError::NonFinite(i));
            }
        }
        Ok(VectorField { grid, components })
    }

    pub fn from_fn<F: Fn(&[f64]) -> [f64; 3]>(grid: Grid, f: F) -> Result<Self, SpectralError> {
        let mut comps = vec![Vec::with_capacity(grid.len()); grid.dim];
        for i in 0..grid.len() {
            let v = f(&grid.point(i)[..grid.dim]);
            for (a, c) in comps.iter_mut().enumerate() {
                c.push(v[a]);
            }
        }
        VectorField::new(grid, comps)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.components
    }

    pub fn component(&self, axis: usize) -> &[f64] {
        &self.components[axis]
    }
}

/// Cached FFT plans and wavenumber tables for one grid.
pub struct SpectralContext {
    grid: Grid,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    xi_sq: Vec<f64>,
    // Per-axis derivative wavenumbers with the Nyquist mode set to zero.
    xi_deriv: Vec<Vec<f64>>,
}

thread_local! {
    static CONTEXTS: RefCell<HashMap<(usize, usize, u64), Rc<SpectralContext>>> = RefCell::new(HashMap::new());
}

impl SpectralContext {
    pub fn get(grid: &Grid) -> Rc<SpectralContext> {
        let key = (grid.dim, grid.n, grid.half_width.to_bits());
        CONTEXTS.with(|c| {
            c.borrow_mut().entry(key).or_insert_with(|| Rc::new(SpectralContext::build(*grid))).clone()
        })
    }

    fn build(grid: Grid) -> Self {
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(grid.n);
        let inv = planner.plan_fft_inverse(grid.n);
        let dxi = grid.dxi();
        let mut xi_sq = vec![0.0; grid.len()];
        let mut xi_deriv = vec![vec![0.0; grid.len()]; grid.dim];
        for flat in 0..grid.len() {
            let idx = grid.multi_index(flat);
            for a in 0..grid.dim {
                let k = grid.wavenumber(idx[a]);
                let xi = k as f64 * dxi;
                xi_sq[flat] += xi * xi;
                if idx[a] != grid.n / 2 {
                    xi_deriv[a][flat] = xi;
                }
            }
        }
        SpectralContext { grid, fwd, inv, xi_sq, xi_deriv }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// `|ξ|²` per FFT-ordered mode.
    pub fn xi_sq(&self) -> &[f64] {
        &self.xi_sq
    }

    fn fft_nd(&self, buf: &mut [Complex64], inverse: bool) {
        let plan = if inverse { &self.inv } else { &self.fwd };
        let n = self.grid.n;
        let d = self.grid.dim;
        // Last axis is contiguous; rustfft processes every length-n chunk.
        plan.process(buf);
        if d == 1 {
            return;
        }
        let mut line = vec![Complex64::new(0.0, 0.0); n];
        for axis in 0..d - 1 {
            let stride = n.pow((d - 1 - axis) as u32);
            let block = stride * n;
            for outer in (0..buf.len()).step_by(block) {
                for inner in 0..stride {
                    let base = outer + inner;
                    for (i, l) in line.iter_mut().enumerate() {
                        *l = buf[base + i * stride];
                    }
                    plan.process(&mut line);
                    for (i, l) in line.iter().enumerate() {
                        buf[base + i * stride] = *l;
                    }
                }
            }
        }
    }

    /// Unnormalized DFT with kernel `e^{-2πi jk/n}`.
    pub fn dft(&self, values: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fft_nd(&mut buf, false);
        buf
    }

    /// Inverse of [`dft`](Self::dft) (including the `1/n^d` factor), real part only.
    pub fn idft_real(&self, mut buf: Vec<Complex64>) -> Vec<f64> {
        self.fft_nd(&mut buf, true);
        let scale = 1.0 / self.grid.len() as f64;
        buf.iter().map(|c| c.re * scale).collect()
    }

    /// Applies a real even multiplier given per mode.
    pub fn filter(&self, values: &[f64], mult: &[f64]) -> Vec<f64> {
        let mut buf = self.dft(values);
        for (c, m) in buf.iter_mut().zip(mult) {
            *c *= *m;
        }
        self.idft_real(buf)
    }

    /// Applies a radial multiplier `m(|ξ|²)`.
    pub fn filter_radial<M: Fn(f64) -> f64>(&self, values: &[f64], m: M) -> Vec<f64> {
        let mult: Vec<f64> = self.xi_sq.iter().map(|&k2| m(k2)).collect();
        self.filter(values, &mult)
    }

    /// Multiplier table `m(|ξ|²)`.
    pub fn radial_table<M: Fn(f64) -> f64>(&self, m: M) -> Vec<f64> {
        self.xi_sq.iter().map(|&k2| m(k2)).collect()
    }

    /// Derivative symbols `ξ_a` per mode, zero on the Nyquist plane.
    pub fn xi_deriv(&self, axis: usize) -> &[f64] {
        &self.xi_deriv[axis]
    }

    pub fn derivative(&self, values: &[f64], axis: usize) -> Vec<f64> {
        let mut buf = self.dft(values);
        for (c, &xi) in buf.iter_mut().zip(&self.xi_deriv[axis]) {
            *c *= Complex64::new(0.0, xi);
        }
        self.idft_real(buf)
    }

    /// `Σ_a ∂_a V_a`, with a single inverse transform.
    pub fn divergence(&self, components: &[&[f64]]) -> Vec<f64> {
        let mut acc = vec![Complex64::new(0.0, 0.0); self.grid.len()];
        for (a, comp) in components.iter().enumerate() {
            let buf = self.dft(comp);
            for ((s, c), &xi) in acc.iter_mut().zip(&buf).zip(&self.xi_deriv[a]) {
                *s += c * Complex64::new(0.0, xi);
            }
        }
        self.idft_real(acc)
    }

    /// `Σ_k m_k |F_k|² dξ^d` in the symmetric convention.
    pub fn weighted_energy(&self, values: &[f64], mult: &[f64]) -> f64 {
        let g = &self.grid;
        let buf = self.dft(values);
        let d = g.dim as i32;
        let factor = g.cell_volume().powi(2) * (2.0 * PI).powi(-d) * g.dxi().powi(d);
        buf.iter().zip(mult).map(|(c, m)| m * c.norm_sqr()).sum::<f64>() * factor
    }

    /// Removes modes with `|k_a| > n/3` on any axis.
    pub fn dealias(&self, values: &[f64]) -> Vec<f64> {
        let g = self.grid;
        let cut = (g.n / 3) as i64;
        let mut buf = self.dft(values);
        for (flat, c) in buf.iter_mut().enumerate() {
            let idx = g.multi_index(flat);
            if (0..g.dim).any(|a| g.wavenumber(idx[a]).abs() > cut) {
                *c = Complex64::new(0.0, 0.0);
            }
        }
        self.idft_real(buf)
    }
}

fn parity_sign(grid: &Grid, flat: usize) -> f64 {
    let idx = grid.multi_index(flat);
    let s: usize = idx[..grid.dim].iter().sum();
    if s % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

pub fn forward_transform(f: &Field) -> Spectrum {
    let g = *f.grid();
    let ctx = SpectralContext::get(&g);
    let mut buf: Vec<Complex64> = f.values().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    ctx.fft_nd(&mut buf, true);
    let scale = g.cell_volume() * (2.0 * PI).powf(-(g.dim as f64) / 2.0);
    for (flat, c) in buf.iter_mut().enumerate() {
        *c *= scale * parity_sign(&g, flat);
    }
    Spectrum { grid: g, coefficients: buf }
}

pub fn inverse_transform(s: &Spectrum) -> Result<Field, SpectralError> {
    let g = s.grid;
    if s.coefficients.len() != g.len() {
        return Err(SpectralError::LengthMismatch { expected: g.len(), got: s.coefficients.len() });
    }
    let ctx = SpectralContext::get(&g);
    let mut buf: Vec<Complex64> =
        s.coefficients.iter().enumerate().map(|(flat, c)| c * parity_sign(&g, flat)).collect();
    ctx.fft_nd(&mut buf, false);
    let scale = (2.0 * PI).powf(-(g.dim as f64) / 2.0) * g.dxi().powi(g.dim as i32);
    let re_max = buf.iter().fold(0.0f64, |m, c| m.max(c.re.abs()));
    let im_max = buf.iter().fold(0.0f64, |m, c| m.max(c.im.abs()));
    if im_max > 0.0 {
        let rel = im_max / re_max.max(f64::MIN_POSITIVE);
        if rel > 1e-10 {
            return Err(SpectralError::NonHermitianSpectrum(rel));
        }
    }
    let values: Vec<f64> = buf.iter().map(|c| c.re * scale).collect();
    Field::new(g, values)
}

pub fn apply_fractional_laplacian(f: &Field, s: f64) -> Field {
    let ctx = SpectralContext::get(f.grid());
    Field::from_raw(*f.grid(), ctx.filter_radial(f.values(), |k2| if k2 == 0.0 { 0.0 } else { k2.powf(s) }))
}

fn mass_is_zero(f: &Field) -> bool {
    f.mass().abs() <= 1e-12 * f.l1().max(1.0)
}

/// `(εI − Δ)^σ f`.
pub fn apply_bessel_power(f: &Field, eps: f64, sigma: f64) -> Result<Field, SpectralError> {
    if eps < 0.0 {
        return Err(SpectralError::InvalidParameter(format!("eps = {eps} must be >= 0")));
    }
    if eps == 0.0 && sigma < 0.0 && !mass_is_zero(f) {
        return Err(SpectralError::SingularInverse(f.mass()));
    }
    let ctx = SpectralContext::get(f.grid());
    let v = ctx.filter_radial(f.values(), |k2| {
        let base = eps + k2;
        if base == 0.0 {
            if sigma > 0.0 {
                0.0
            } else if sigma == 0.0 {
                1.0
            } else {
                // zero mode of a mass-free field
                0.0
            }
        } else {
            base.powf(sigma)
        }
    });
    Ok(Field::from_raw(*f.grid(), v))
}

/// `Φ_ε f = (εI + (−Δ)^s)^{-1} f`.
pub fn bessel_resolvent_phi(f: &Field, eps: f64, s: f64) -> Result<Field, SpectralError> {
    if !(eps > 0.0) {
        return Err(SpectralError::InvalidParameter(format!("eps = {eps} must be > 0")));
    }
    let ctx = SpectralContext::get(f.grid());
    Ok(Field::from_raw(*f.grid(), ctx.filter_radial(f.values(), |k2| 1.0 / (eps + k2.powf(s)))))
}

pub fn gradient(f: &Field) -> VectorField {
    let g = *f.grid();
    let ctx = SpectralContext::get(&g);
    let comps = (0..g.dim).map(|a| ctx.derivative(f.values(), a)).collect();
    VectorField { grid: g, components: comps }
}

pub fn divergence(v: &VectorField) -> Field {
    let g = *v.grid();
    let ctx = SpectralContext::get(&g);
    let comps: Vec<&[f64]> = v.components.iter().map(|c| c.as_slice()).collect();
    Field::from_raw(g, ctx.divergence(&comps))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Norms {
    pub l1: f64,
    pub l2: f64,
    pub linf: f64,
    /// `|f|_{Ḣ^s}` for the order passed to [`norms`].
    pub hs_semi: f64,
}

pub fn norms(f: &Field, s: f64) -> Norms {
    Norms { l1: f.l1(), l2: f.l2(), linf: f.linf(), hs_semi: hs_semi(f, s) }
}

pub fn hs_semi(f: &Field, s: f64) -> f64 {
    let ctx = SpectralContext::get(f.grid());
    let mult = ctx.radial_table(|k2| if k2 == 0.0 { 0.0 } else { k2.powf(s) });
    ctx.weighted_energy(f.values(), &mult).sqrt()
}

/// `(Σ |F(ξ)|² / (ε + |ξ|^{2s}) dξ^d)^{1/2}`; with `ε = 0` the field must be mass-free.
pub fn h_minus_s(f: &Field, s: f64, eps: f64) -> Result<f64, SpectralError> {
    if eps < 0.0 {
        return Err(SpectralError::InvalidParameter(format!("eps = {eps} must be >= 0")));
    }
    if eps == 0.0 && !mass_is_zero(f) {
        return Err(SpectralError::SingularInverse(f.mass()));
    }
    let ctx = SpectralContext::get(f.grid());
    let mult = ctx.radial_table(|k2| {
        let den = eps + k2.powf(s);
        if den == 0.0 {
            0.0
        } else {
            1.0 / den
        }
    });
    Ok(ctx.weighted_energy(f.values(), &mult).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(grid: Grid, seed: u64) -> Field {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Field::new(grid, (0..grid.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn cosine(grid: Grid, k: &[i64]) -> Field {
        let dxi = grid.dxi();
        Field::from_fn(grid, |x| {
            let phase: f64 = x.iter().zip(k).map(|(xi, &ki)| xi * ki as f64 * dxi).sum();
            phase.cos()
        })
        .unwrap()
    }

    fn grids() -> Vec<Grid> {
        vec![Grid::new(1, 64, 3.0).unwrap(), Grid::new(2, 16, 2.0).unwrap(), Grid::new(3, 8, 1.5).unwrap()]
    }

    #[test]
    fn grid_validation() {
        assert!(Grid::new(0, 16, 1.0).is_err());
        assert!(Grid::new(4, 16, 1.0).is_err());
        assert!(Grid::new(1, 4, 1.0).is_err());
        assert!(Grid::new(1, 24, 1.0).is_err());
        assert!(Grid::new(1, 16, 0.0).is_err());
        assert!(Field::new(Grid::new(1, 8, 1.0).unwrap(), vec![f64::NAN; 8]).is_err());
    }

    #[test]
    fn constant_transforms_to_zero_mode() {
        for g in grids() {
            let c = 1.7;
            let s = forward_transform(&Field::constant(g, c));
            let expected = c * g.volume() * (2.0 * PI).powf(-(g.dim as f64) / 2.0);
            assert!((s.coefficients[0].re - expected).abs() < 1e-12 * expected);
            let rest = s.coefficients[1..].iter().fold(0.0f64, |m, c| m.max(c.norm()));
            assert!(rest < 1e-12 * expected);
        }
    }

    #[test]
    fn cosine_has_two_modes() {
        let g = Grid::new(2, 16, 2.0).unwrap();
        let s = forward_transform(&cosine(g, &[3, -2]));
        let i1 = s.mode_index(&[3, -2]);
        let i2 = s.mode_index(&[-3, 2]);
        let peak = s.coefficients[i1].norm();
        for (i, c) in s.coefficients.iter().enumerate() {
            if i != i1 && i != i2 {
                assert!(c.norm() < 1e-12 * peak);
            }
        }
        assert!((s.coefficients[i1] - s.coefficients[i2].conj()).norm() < 1e-12 * peak);
    }

    #[test]
    fn transform_matches_continuum_integral_for_gaussian() {
        // (2π)^{-1/2} ∫ e^{ixξ} e^{-x²/2} dx = e^{-ξ²/2}
        let g = Grid::new(1, 128, 12.0).unwrap();
        let f = Field::from_fn(g, |x| (-x[0] * x[0] / 2.0).exp()).unwrap();
        let s = forward_transform(&f);
        for k in [-5i64, 0, 3, 7] {
            let xi = k as f64 * g.dxi();
            let c = s.coefficients[s.mode_index(&[k])];
            assert!((c.re - (-xi * xi / 2.0).exp()).abs() < 1e-12, "k={k}");
            assert!(c.im.abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip_and_parseval() {
        for (seed, g) in grids().into_iter().enumerate() {
            let f = random_field(g, seed as u64);
            let s = forward_transform(&f);
            assert!(s.hermitian_defect() < 1e-13);
            let back = inverse_transform(&s).unwrap();
            let err = f.values().iter().zip(back.values()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err < 1e-12 * f.linf());
            let energy: f64 = s.coefficients.iter().map(|c| c.norm_sqr()).sum::<f64>() * g.dxi().powi(g.dim as i32);
            let l2sq = f.l2().powi(2);
            assert!((energy - l2sq).abs() < 1e-12 * l2sq);
        }
    }

    #[test]
    fn zero_and_single_pair_spectra() {
        let g = Grid::new(1, 32, 2.0).unwrap();
        assert_eq!(inverse_transform(&Spectrum::zeros(g)).unwrap(), Field::zeros(g));
        let mut s = Spectrum::zeros(g);
        let a = s.mode_index(&[2]);
        let b = s.mode_index(&[-2]);
        s.coefficients[a] = Complex64::new(1.0, 0.0);
        s.coefficients[b] = Complex64::new(1.0, 0.0);
        let f = inverse_transform(&s).unwrap();
        let amp = 2.0 * (2.0 * PI).powf(-0.5) * g.dxi();
        let expected = cosine(g, &[2]).scaled(amp);
        assert!(f.l1_distance(&expected) < 1e-13);
    }

    #[test]
    fn non_hermitian_spectrum_is_rejected() {
        let g = Grid::new(1, 16, 1.0).unwrap();
        let mut s = Spectrum::zeros(g);
        let i = s.mode_index(&[1]);
        s.coefficients[i] = Complex64::new(1.0, 0.0);
        assert!(matches!(inverse_transform(&s), Err(SpectralError::NonHermitianSpectrum(_))));
    }

    #[test]
    fn fractional_laplacian_on_modes() {
        for g in grids() {
            let k: Vec<i64> = (0..g.dim as i64).map(|a| a + 1).collect();
            let f = cosine(g, &k);
            let xi2: f64 = k.iter().map(|&ki| (ki as f64 * g.dxi()).powi(2)).sum();
            for s in [0.3, 0.75, 1.0] {
                let lf = apply_fractional_laplacian(&f, s);
                let expected = f.scaled(xi2.powf(s));
                assert!(lf.l1_distance(&expected) < 1e-11 * expected.l1());
            }
            assert!(apply_fractional_laplacian(&Field::constant(g, 2.0), 0.6).linf() < 1e-13);
        }
    }

    fn strip_nyquist(f: &Field) -> Field {
        let g = *f.grid();
        let ctx = SpectralContext::get(&g);
        let mut buf = ctx.dft(f.values());
        for (flat, c) in buf.iter_mut().enumerate() {
            let idx = g.multi_index(flat);
            if (0..g.dim).any(|a| idx[a] == g.n / 2) {
                *c = Complex64::new(0.0, 0.0);
            }
        }
        Field::new(g, ctx.idft_real(buf)).unwrap()
    }

    #[test]
    fn laplacian_order_one_matches_divergence_of_gradient() {
        for (seed, g) in grids().into_iter().enumerate() {
            let f = random_field(g, 10 + seed as u64);
            let lap = apply_fractional_laplacian(&f, 1.0);
            let ctx = SpectralContext::get(&g);
            let direct = ctx.filter_radial(f.values(), |k2| k2);
            let err = lap.values().iter().zip(&direct).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err < 1e-12 * lap.linf());
            // The Nyquist mode has no odd derivative, so the identity holds on fields without it.
            let f = strip_nyquist(&f);
            let dg = divergence(&gradient(&f));
            let lap = apply_fractional_laplacian(&f, 1.0);
            let err = dg.values().iter().zip(lap.values()).fold(0.0f64, |m, (a, b)| m.max((a + b).abs()));
            assert!(err < 1e-10 * lap.linf(), "{err}");
        }
    }

    #[test]
    fn bessel_power_identities() {
        let g = Grid::new(2, 16, 2.0).unwrap();
        let f = random_field(g, 3);
        let id = apply_bessel_power(&f, 0.5, 0.0).unwrap();
        assert!(id.l1_distance(&f) < 1e-13);
        let there = apply_bessel_power(&f, 0.3, 0.7).unwrap();
        let back = apply_bessel_power(&there, 0.3, -0.7).unwrap();
        assert!(back.l1_distance(&f) < 1e-10);
        let c = apply_bessel_power(&Field::constant(g, 2.0), 0.25, 0.75).unwrap();
        assert!((c.values()[5] - 2.0 * 0.25f64.powf(0.75)).abs() < 1e-13);
        assert!(matches!(apply_bessel_power(&Field::constant(g, 1.0), 0.0, -0.5), Err(SpectralError::SingularInverse(_))));
        let zero_mass = cosine(g, &[1, 0]);
        assert!(apply_bessel_power(&zero_mass, 0.0, -0.5).is_ok());
    }

    #[test]
    fn phi_on_constant_and_mode() {
        let g = Grid::new(1, 32, 2.0).unwrap();
        let c = bessel_resolvent_phi(&Field::constant(g, 3.0), 0.5, 0.7).unwrap();
        assert!((c.values()[0] - 6.0).abs() < 1e-12);
        let f = cosine(g, &[4]);
        let xi = 4.0 * g.dxi();
        let phi = bessel_resolvent_phi(&f, 0.5, 0.7).unwrap();
        assert!(phi.l1_distance(&f.scaled(1.0 / (0.5 + xi.powf(1.4)))) < 1e-13);
        assert!(bessel_resolvent_phi(&f, 0.0, 0.7).is_err());
    }

    #[test]
    fn phi_is_an_lp_contraction_after_scaling() {
        let g = Grid::new(1, 128, 4.0).unwrap();
        for seed in 0..10 {
            let f = random_field(g, 100 + seed);
            for eps in [0.1, 1.0, 5.0] {
                let phi = bessel_resolvent_phi(&f, eps, 0.6).unwrap().scaled(eps);
                assert!(phi.l1() <= f.l1() * (1.0 + 1e-12));
                assert!(phi.l2() <= f.l2() * (1.0 + 1e-12));
                assert!(phi.linf() <= f.linf() * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn gradient_of_constant_and_divergence_mean() {
        for (seed, g) in grids().into_iter().enumerate() {
            let grad = gradient(&Field::constant(g, 4.0));
            assert!(grad.components().iter().all(|c| c.iter().all(|v| v.abs() < 1e-13)));
            let comps = (0..g.dim).map(|a| random_field(g, 50 + seed as u64 + a as u64).into_values()).collect();
            let v = VectorField::new(g, comps).unwrap();
            assert!(divergence(&v).mass().abs() < 1e-12);
        }
    }

    #[test]
    fn divergence_of_gradient_of_mode() {
        let g = Grid::new(2, 32, 2.0).unwrap();
        let f = cosine(g, &[2, 3]);
        let xi2 = (2.0 * g.dxi()).powi(2) + (3.0 * g.dxi()).powi(2);
        let dg = divergence(&gradient(&f));
        assert!(dg.l1_distance(&f.scaled(-xi2)) < 1e-11 * xi2);
    }

    #[test]
    fn mode_norms() {
        let g = Grid::new(1, 64, 3.0).unwrap();
        let f = cosine(g, &[5]);
        let xi = 5.0 * g.dxi();
        let n = norms(&f, 0.4);
        assert!((n.hs_semi - xi.powf(0.4) * n.l2).abs() < 1e-12 * n.l2);
        assert!(hs_semi(&Field::constant(g, 3.0), 0.4) < 1e-13);
        assert!((n.linf - 1.0).abs() < 1e-14);
        let hm = h_minus_s(&f, 0.4, 0.0).unwrap();
        assert!((hm - xi.powf(-0.4) * n.l2).abs() < 1e-12 * n.l2);
        assert!(matches!(h_minus_s(&Field::constant(g, 1.0), 0.4, 0.0), Err(SpectralError::SingularInverse(_))));
    }

    #[test]
    fn dealias_keeps_low_modes() {
        let g = Grid::new(1, 32, 2.0).unwrap();
        let low = cosine(g, &[3]);
        let high = cosine(g, &[14]);
        let ctx = SpectralContext::get(&g);
        let d = ctx.dealias(low.lincomb(1.0, &high, 1.0).values());
        assert!(Field::new(g, d).unwrap().l1_distance(&low) < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn fractional_laplacian_is_psd_linear_and_mass_free(seed in 0u64..1000, s in 0.05f64..1.0, a in -3.0f64..3.0) {
            let g = Grid::new(1, 64, 2.5).unwrap();
            let f = random_field(g, seed);
            let h = random_field(g, seed + 7777);
            let lf = apply_fractional_laplacian(&f, s);
            prop_assert!(f.inner(&lf) >= -1e-12 * lf.l2() * f.l2());
            prop_assert!(lf.mass().abs() < 1e-12 * lf.l1().max(1.0));
            let lin = apply_fractional_laplacian(&f.lincomb(a, &h, 1.0), s);
            let sep = lf.lincomb(a, &apply_fractional_laplacian(&h, s), 1.0);
            prop_assert!(lin.l1_distance(&sep) < 1e-11 * sep.l1().max(1.0));
        }

        #[test]
        fn fractional_laplacian_semigroup(seed in 0u64..1000, a in 0.05f64..0.5, b in 0.05f64..0.5) {
            let g = Grid::new(1, 32, 2.0).unwrap();
            let f = random_field(g, seed);
            let two = apply_fractional_laplacian(&apply_fractional_laplacian(&f, a), b);
            let one = apply_fractional_laplacian(&f, a + b);
            prop_assert!(two.l1_distance(&one) < 1e-12 * one.l1());
        }

        #[test]
        fn parseval_everywhere(seed in 0u64..1000, n in prop::sample::select(vec![8usize, 16, 32, 64]), l in 0.5f64..10.0) {
            let g = Grid::new(1, n, l).unwrap();
            let f = random_field(g, seed);
            let s = forward_transform(&f);
            let energy: f64 = s.coefficients.iter().map(|c| c.norm_sqr()).sum::<f64>() * g.dxi();
            prop_assert!((energy - f.l2().powi(2)).abs() < 1e-12 * energy);
        }
    }
}

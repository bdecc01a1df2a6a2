//! Coefficient triple `(β, b, D)`, its regularizations and truncations, and
//! probe-based hypothesis checks.
//!
//! Validation is a rejection test on finite probe sets: a failed check comes
//! with a witness point, a passed check proves nothing beyond the probes.

use std::fmt;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quadrature::{self, NodeTable, QuadSettings, QuadratureError};

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(&[f64]) -> [f64; 3] + Send + Sync>;
pub type DivFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoefficientError {
    #[error("fractional order s = {s} not admitted: {reason}")]
    InvalidOrder { s: f64, reason: &'static str },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("drift dimension {drift} does not match {expected}")]
    DimensionMismatch { drift: usize, expected: usize },
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
}

/// A scalar nonlinearity with its derivative and optional global bounds.
#[derive(Clone)]
pub struct ScalarFunctionSpec {
    name: String,
    eval: ScalarFn,
    deriv: ScalarFn,
    pub lipschitz_bound: Option<f64>,
    pub sup_bound: Option<f64>,
}

impl fmt::Debug for ScalarFunctionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScalarFunctionSpec")
            .field("name", &self.name)
            .field("lipschitz_bound", &self.lipschitz_bound)
            .field("sup_bound", &self.sup_bound)
            .finish()
    }
}

impl ScalarFunctionSpec {
    pub fn new(
        name: impl Into<String>,
        eval: impl Fn(f64) -> f64 + Send + Sync + 'static,
        deriv: impl Fn(f64) -> f64 + Send + Sync + 'static,
        lipschitz_bound: Option<f64>,
        sup_bound: Option<f64>,
    ) -> Self {
        ScalarFunctionSpec {
            name: name.into(),
            eval: Arc::new(eval),
            deriv: Arc::new(deriv),
            lipschitz_bound,
            sup_bound,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    #[inline]
    pub fn eval(&self, r: f64) -> f64 {
        (self.eval)(r)
    }

    #[inline]
    pub fn derivative(&self, r: f64) -> f64 {
        (self.deriv)(r)
    }

    /// Largest mismatch between the derivative and a central difference,
    /// measured on the scale `max(1, |f'|)`, over the probe points.
    pub fn derivative_defect(&self, probes: &[f64]) -> (f64, f64) {
        let mut worst = (0.0, f64::NAN);
        for &r in probes {
            let h = 1e-4 * r.abs().max(1.0);
            let fd = (self.eval(r + h) - self.eval(r - h)) / (2.0 * h);
            let d = self.derivative(r);
            let err = (fd - d).abs() / d.abs().max(1.0);
            if err > worst.0 || worst.1.is_nan() {
                worst = (err, r);
            }
        }
        worst
    }

    /// `max |f'|` on 2001 evenly spaced points of `[-radius, radius]`.
    pub fn lipschitz_on(&self, radius: f64) -> f64 {
        probe_grid(radius, 2001).into_iter().map(|r| self.derivative(r).abs()).fold(0.0, f64::max)
    }

    /// `min f'` on 2001 evenly spaced points of `[-radius, radius]`.
    pub fn min_slope_on(&self, radius: f64) -> f64 {
        probe_grid(radius, 2001).into_iter().map(|r| self.derivative(r)).fold(f64::INFINITY, f64::min)
    }

    pub fn sup_on(&self, radius: f64) -> f64 {
        probe_grid(radius, 2001).into_iter().map(|r| self.eval(r).abs()).fold(0.0, f64::max)
    }
}

/// `count` evenly spaced points on `[-radius, radius]`.
pub fn probe_grid(radius: f64, count: usize) -> Vec<f64> {
    (0..count).map(|i| -radius + 2.0 * radius * i as f64 / (count - 1) as f64).collect()
}

/// 64 scattered derivative probes in `[-radius, radius]` (golden-ratio sequence, avoids kinks on round numbers).
pub fn derivative_probes(radius: f64) -> Vec<f64> {
    let g = 0.618_033_988_749_894_9;
    (1..=64).map(|i| radius * (2.0 * ((i as f64 * g) % 1.0) - 1.0)).collect()
}

/// Drift field `D: ℝ^d → ℝ^d`.
#[derive(Clone)]
pub struct DriftSpec {
    name: String,
    dim: usize,
    eval: VectorFn,
    divergence: Option<DivFn>,
    pub sup_bound: f64,
    pub div_minus_sup: f64,
    identically_zero: bool,
}

impl fmt::Debug for DriftSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DriftSpec")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("sup_bound", &self.sup_bound)
            .field("div_minus_sup", &self.div_minus_sup)
            .finish()
    }
}

impl DriftSpec {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        eval: impl Fn(&[f64]) -> [f64; 3] + Send + Sync + 'static,
        divergence: Option<DivFn>,
        sup_bound: f64,
        div_minus_sup: f64,
    ) -> Self {
        DriftSpec {
            name: name.into(),
            dim,
            eval: Arc::new(eval),
            divergence,
            sup_bound,
            div_minus_sup,
            identically_zero: false,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_zero(&self) -> bool {
        self.identically_zero
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> [f64; 3] {
        (self.eval)(x)
    }

    pub fn divergence(&self, x: &[f64]) -> Option<f64> {
        self.divergence.as_ref().map(|d| d(x))
    }

    /// `|(div D)^− + |D||_∞` over the probe points (declared bounds when no divergence is known).
    pub fn m_constant(&self, probes: &[Vec<f64>]) -> f64 {
        if self.identically_zero {
            return 0.0;
        }
        match &self.divergence {
            Some(div) => probes
                .iter()
                .map(|x| {
                    let v = self.eval(x);
                    let norm = v[..self.dim].iter().map(|c| c * c).sum::<f64>().sqrt();
                    (-div(x)).max(0.0) + norm
                })
                .fold(0.0, f64::max),
            None => self.div_minus_sup + self.sup_bound,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoefficientSet {
    pub beta: ScalarFunctionSpec,
    pub b: ScalarFunctionSpec,
    pub drift: DriftSpec,
    pub s: f64,
}

impl CoefficientSet {
    /// `s ∈ (1/2, 1)` with a drift, `s ∈ (0, 1)` when `D ≡ 0`.
    pub fn new(beta: ScalarFunctionSpec, b: ScalarFunctionSpec, drift: DriftSpec, s: f64) -> Result<Self, CoefficientError> {
        if !(s > 0.0 && s < 1.0) {
            return Err(CoefficientError::InvalidOrder { s, reason: "must lie in (0, 1)" });
        }
        if !drift.is_zero() && s <= 0.5 {
            return Err(CoefficientError::InvalidOrder { s, reason: "a nonzero drift requires s in (1/2, 1)" });
        }
        Ok(CoefficientSet { beta, b, drift, s })
    }

    pub fn dim(&self) -> usize {
        self.drift.dim()
    }

    /// `b*(r) = b(r) r`.
    pub fn b_star(&self) -> ScalarFunctionSpec {
        let b = self.b.clone();
        let b2 = self.b.clone();
        ScalarFunctionSpec::new(
            format!("{}*r", self.b.name()),
            move |r| b.eval(r) * r,
            move |r| b2.derivative(r) * r + b2.eval(r),
            None,
            None,
        )
    }
}

// ---------------------------------------------------------------------------
// Catalog

pub fn linear(slope: f64) -> ScalarFunctionSpec {
    ScalarFunctionSpec::new(format!("linear({slope})"), move |r| slope * r, move |_| slope, Some(slope.abs()), None)
}

/// `β(r) = |r|^{m−1} r`.
pub fn porous_medium(m: f64) -> ScalarFunctionSpec {
    ScalarFunctionSpec::new(
        format!("porous_medium({m})"),
        move |r: f64| r.abs().powf(m - 1.0) * r,
        move |r: f64| m * r.abs().powf(m - 1.0),
        if m == 1.0 { Some(1.0) } else { None },
        None,
    )
}

pub fn constant(c: f64) -> ScalarFunctionSpec {
    ScalarFunctionSpec::new(format!("constant({c})"), move |_| c, |_| 0.0, Some(0.0), Some(c.abs()))
}

/// `b(r) = 1 / (1 + e^{−k r})`.
pub fn logistic_b(k: f64) -> ScalarFunctionSpec {
    let sig = move |r: f64| 1.0 / (1.0 + (-k * r).exp());
    ScalarFunctionSpec::new(
        format!("logistic_b({k})"),
        sig,
        move |r| {
            let s = sig(r);
            k * s * (1.0 - s)
        },
        Some(k.abs() / 4.0),
        Some(1.0),
    )
}

/// `b(r) = 1 / (1 + r²)`.
pub fn inverse_quadratic() -> ScalarFunctionSpec {
    ScalarFunctionSpec::new(
        "inverse_quadratic",
        |r: f64| 1.0 / (1.0 + r * r),
        |r: f64| -2.0 * r / (1.0 + r * r).powi(2),
        Some(3.0 * 3f64.sqrt() / 8.0),
        Some(1.0),
    )
}

pub fn zero_drift(dim: usize) -> DriftSpec {
    let mut d = DriftSpec::new("zero", dim, |_| [0.0; 3], Some(Arc::new(|_: &[f64]| 0.0)), 0.0, 0.0);
    d.identically_zero = true;
    d
}

pub fn constant_d(v: &[f64]) -> DriftSpec {
    let mut c = [0.0; 3];
    c[..v.len()].copy_from_slice(v);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut d = DriftSpec::new(format!("constant_D({v:?})"), v.len(), move |_| c, Some(Arc::new(|_: &[f64]| 0.0)), norm, 0.0);
    d.identically_zero = norm == 0.0;
    d
}

/// `D(x) = a·sin(κ x_1) e_1`; periodic on a box of half-width `π/κ` (or any multiple).
pub fn sine_d(dim: usize, amplitude: f64, kappa: f64) -> DriftSpec {
    DriftSpec::new(
        format!("sine_D({amplitude}, {kappa})"),
        dim,
        move |x| [amplitude * (kappa * x[0]).sin(), 0.0, 0.0],
        Some(Arc::new(move |x: &[f64]| amplitude * kappa * (kappa * x[0]).cos())),
        amplitude.abs(),
        (amplitude * kappa).abs(),
    )
}

/// Divergence-free `D(x) = a(−sin(κ x_2), sin(κ x_1), 0)`; needs `d ≥ 2`.
pub fn rotational_d(dim: usize, amplitude: f64, kappa: f64) -> Result<DriftSpec, CoefficientError> {
    if dim < 2 {
        return Err(CoefficientError::InvalidParameter("rotational_D needs dimension >= 2".into()));
    }
    Ok(DriftSpec::new(
        format!("rotational_D({amplitude}, {kappa})"),
        dim,
        move |x| [-amplitude * (kappa * x[1]).sin(), amplitude * (kappa * x[0]).sin(), 0.0],
        Some(Arc::new(|_: &[f64]| 0.0)),
        amplitude.abs() * 2f64.sqrt(),
        0.0,
    ))
}

// ---------------------------------------------------------------------------
// Regularizations

/// `β_ε(r) = β(r) + ε r`.
pub fn regularize_beta(beta: &ScalarFunctionSpec, eps: f64) -> ScalarFunctionSpec {
    let b1 = beta.clone();
    let b2 = beta.clone();
    ScalarFunctionSpec::new(
        format!("{}+{eps}r", beta.name()),
        move |r| b1.eval(r) + eps * r,
        move |r| b2.derivative(r) + eps,
        beta.lipschitz_bound.map(|l| l + eps),
        None,
    )
}

fn bump(t: f64) -> f64 {
    if t.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - t * t)).exp()
    }
}

struct Mollifier {
    table: NodeTable,
    // ∫|φ'| = 2 φ(0) for the normalized bump.
    phi0: f64,
}

fn mollifier() -> &'static Mollifier {
    static M: OnceLock<Mollifier> = OnceLock::new();
    M.get_or_init(|| {
        let settings = QuadSettings::new(1e-13, 1e-13);
        let norm = quadrature::integrate(bump, -1.0, 1.0, &settings).expect("bump normalization").value;
        let mut table = NodeTable::adapted(bump, -1.0, 1.0, 0.125, &settings).expect("bump partition");
        for (w, &t) in table.weights.iter_mut().zip(&table.nodes) {
            *w *= bump(t) / norm;
        }
        Mollifier { table, phi0: bump(0.0) / norm }
    })
}

/// Normalized bump `φ(t) = c·exp(−1/(1−t²))` on `|t| < 1`.
pub fn mollifier_density(t: f64) -> f64 {
    let m = mollifier();
    bump(t) * m.phi0 / bump(0.0)
}

/// `∫ φ(t) cos(k t) dt` for the normalized bump.
pub fn mollifier_fourier(k: f64) -> f64 {
    let m = mollifier();
    m.table.nodes.iter().zip(&m.table.weights).map(|(&t, &w)| w * (k * t).cos()).sum()
}

/// `(f ∗ φ_ε)(r) = ∫ f(r − εt) φ(t) dt` on the cached node table.
pub fn mollify(f: &(dyn Fn(f64) -> f64 + Send + Sync), eps: f64, r: f64) -> f64 {
    let m = mollifier();
    m.table.nodes.iter().zip(&m.table.weights).map(|(&t, &w)| w * f(r - eps * t)).sum()
}

/// Same convolution by fully adaptive quadrature, used as a reference.
pub fn mollify_adaptive(f: impl Fn(f64) -> f64, eps: f64, r: f64, tol: f64) -> Result<f64, QuadratureError> {
    let c = mollifier().phi0 / bump(0.0);
    let settings = QuadSettings::new(tol, tol);
    Ok(quadrature::integrate(|t| c * bump(t) * f(r - eps * t), -1.0, 1.0, &settings)?.value)
}

/// `(b_ε, b*_ε)` with `b_ε = (b ∗ φ_ε)/(1 + ε|r|)` and `b*_ε = b_ε r`.
pub fn regularize_b(b: &ScalarFunctionSpec, eps: f64) -> (ScalarFunctionSpec, ScalarFunctionSpec) {
    let (e, d) = (b.clone(), b.clone());
    let m: ScalarFn = Arc::new(move |r| mollify(&|x| e.eval(x), eps, r));
    let mp: ScalarFn = Arc::new(move |r| mollify(&|x| d.derivative(x), eps, r));
    let sgn = |r: f64| if r > 0.0 { 1.0 } else if r < 0.0 { -1.0 } else { 0.0 };
    let (m1, m2, m3, m4) = (m.clone(), m.clone(), m.clone(), m);
    let (mp1, mp2) = (mp.clone(), mp);
    let b_eps = ScalarFunctionSpec::new(
        format!("{}_eps({eps})", b.name()),
        move |r| m1(r) / (1.0 + eps * r.abs()),
        move |r| {
            let q = 1.0 + eps * r.abs();
            mp1(r) / q - m2(r) * eps * sgn(r) / (q * q)
        },
        None,
        b.sup_bound,
    );
    // |b*_ε'| ≤ |b' ∗ φ_ε|·|r|/(1+ε|r|) + sup|b| ≤ Lip(b)/ε + sup|b|.
    let star_lip = match (b.sup_bound, b.lipschitz_bound) {
        (Some(s), Some(l)) => Some(l / eps + s),
        _ => None,
    };
    let b_star = ScalarFunctionSpec::new(
        format!("{}_eps({eps})*r", b.name()),
        move |r| m3(r) * r / (1.0 + eps * r.abs()),
        move |r| {
            let q = 1.0 + eps * r.abs();
            mp2(r) * r / q + m4(r) / (q * q)
        },
        star_lip,
        None,
    );
    (b_eps, b_star)
}

/// Radial smoothstep ramp: 1 for `|x| ≤ 1/ε`, 0 for `|x| ≥ 1/ε + 2`.
pub fn cutoff_profile(eps: f64, x: &[f64]) -> (f64, [f64; 3]) {
    let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let t = ((r - 1.0 / eps) / 2.0).clamp(0.0, 1.0);
    let eta = 1.0 - t * t * (3.0 - 2.0 * t);
    let mut grad = [0.0; 3];
    if t > 0.0 && t < 1.0 && r > 0.0 {
        let deta_dr = -3.0 * t * (1.0 - t);
        for (g, xi) in grad.iter_mut().zip(x) {
            *g = deta_dr * xi / r;
        }
    }
    (eta, grad)
}

/// `D_ε = η_ε D`.
pub fn cutoff_d(drift: &DriftSpec, eps: f64) -> DriftSpec {
    if drift.is_zero() {
        return drift.clone();
    }
    let d1 = drift.clone();
    let d2 = drift.clone();
    let dim = drift.dim();
    let divergence: Option<DivFn> = drift.divergence.as_ref().map(|_| {
        let f: DivFn = Arc::new(move |x: &[f64]| {
            let (eta, grad) = cutoff_profile(eps, x);
            let v = d2.eval(x);
            let gd: f64 = (0..dim).map(|a| grad[a] * v[a]).sum();
            eta * d2.divergence(x).unwrap_or(0.0) + gd
        });
        f
    });
    DriftSpec::new(
        format!("{}_cut({eps})", drift.name()),
        dim,
        move |x| {
            let (eta, _) = cutoff_profile(eps, x);
            let v = d1.eval(x);
            [eta * v[0], eta * v[1], eta * v[2]]
        },
        divergence,
        drift.sup_bound,
        drift.div_minus_sup + 0.75 * drift.sup_bound,
    )
}

/// C¹ truncation: `f` on `[-N, N]`, affine with matching slope outside.
pub fn truncate(f: &ScalarFunctionSpec, n: f64) -> Result<ScalarFunctionSpec, CoefficientError> {
    if !(n > 0.0) {
        return Err(CoefficientError::InvalidParameter(format!("truncation level {n} must be positive")));
    }
    let (fp, fm) = (f.eval(n), f.eval(-n));
    let (dp, dm) = (f.derivative(n), f.derivative(-n));
    let e = f.clone();
    let d = f.clone();
    let lip = f.lipschitz_on(n).max(dp.abs()).max(dm.abs());
    let sup = if dp == 0.0 && dm == 0.0 { Some(f.sup_on(n)) } else { None };
    Ok(ScalarFunctionSpec::new(
        format!("{}|N={n}", f.name()),
        move |r| {
            if r > n {
                dp * (r - n) + fp
            } else if r < -n {
                dm * (r + n) + fm
            } else {
                e.eval(r)
            }
        },
        move |r| {
            if r > n {
                dp
            } else if r < -n {
                dm
            } else {
                d.derivative(r)
            }
        },
        Some(lip),
        sup,
    ))
}

/// `λ_0 = [M + M^{1/2}|b|_∞]^{-1}` with `M = |(div D)^− + |D||_∞`; `+∞` when the bracket vanishes.
pub fn lambda0(cs: &CoefficientSet, x_probes: &[Vec<f64>]) -> f64 {
    let m = cs.drift.m_constant(x_probes);
    let bsup = cs.b.sup_bound.unwrap_or_else(|| cs.b.sup_on(100.0));
    let den = m + m.sqrt() * bsup;
    if den == 0.0 {
        f64::INFINITY
    } else {
        1.0 / den
    }
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValidationMode {
    Existence,
    Uniqueness,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisCheck {
    pub name: String,
    pub passed: bool,
    pub witness: Option<Vec<f64>>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisReport {
    pub mode: ValidationMode,
    pub checks: Vec<HypothesisCheck>,
    /// Uniqueness mode: (j), or (j)′ with `D ≡ 0`, together with (jj) and (jjj).
    pub admissible: bool,
}

impl HypothesisReport {
    pub fn check(&self, name: &str) -> Option<&HypothesisCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub r_points: Vec<f64>,
    pub x_points: Vec<Vec<f64>>,
}

impl ProbeConfig {
    /// r-probes on `[-r_max, r_max]` (including 0) and x-probes on a lattice of `[-x_max, x_max]^d`.
    pub fn uniform(dim: usize, r_max: f64, x_max: f64) -> Self {
        let r_points = probe_grid(r_max, 401);
        let per_axis = match dim {
            1 => 257,
            2 => 33,
            _ => 13,
        };
        let axis = probe_grid(x_max, per_axis);
        let mut x_points = vec![Vec::new()];
        for _ in 0..dim {
            x_points = x_points
                .into_iter()
                .flat_map(|p| {
                    axis.iter().map(move |&a| {
                        let mut q = p.clone();
                        q.push(a);
                        q
                    })
                })
                .collect();
        }
        ProbeConfig { r_points, x_points }
    }
}

fn check(name: &str, witness: Option<Vec<f64>>, detail: String) -> HypothesisCheck {
    HypothesisCheck { name: name.to_string(), passed: witness.is_none(), witness, detail }
}

fn first_where(points: &[f64], bad: impl Fn(f64) -> bool) -> Option<Vec<f64>> {
    points.iter().copied().find(|&r| bad(r)).map(|r| vec![r])
}

pub fn validate(cs: &CoefficientSet, mode: ValidationMode, probes: &ProbeConfig) -> HypothesisReport {
    let rs = &probes.r_points;
    let r_max = rs.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    let deriv_probes = derivative_probes(r_max.max(1.0));
    let beta = &cs.beta;
    let b = &cs.b;
    let drift = &cs.drift;
    let dim = drift.dim();

    let (beta_def, beta_wit) = beta.derivative_defect(&deriv_probes);
    let beta_c1 = check(
        "beta_c1",
        (beta_def > 1e-6).then(|| vec![beta_wit]),
        format!("derivative defect {beta_def:.2e}"),
    );
    let beta_zero = check(
        "beta_zero_at_zero",
        (beta.eval(0.0).abs() > 1e-14).then(|| vec![0.0]),
        format!("beta(0) = {:e}", beta.eval(0.0)),
    );
    let lip = beta.lipschitz_bound;
    let lip_probe = rs.iter().map(|&r| beta.derivative(r).abs()).fold(0.0, f64::max);
    let beta_lip = check(
        "beta_lipschitz",
        match lip {
            Some(l) => first_where(rs, |r| beta.derivative(r).abs() > l * (1.0 + 1e-12)),
            None => Some(vec![r_max]),
        },
        format!("declared {lip:?}, probed max |beta'| = {lip_probe:.4e}"),
    );
    let strict_off_zero = check(
        "beta_increasing_off_zero",
        first_where(rs, |r| r != 0.0 && beta.derivative(r) <= 0.0),
        "beta'(r) > 0 for r != 0".into(),
    );
    let strict = check("beta_increasing", first_where(rs, |r| beta.derivative(r) <= 0.0), "beta'(r) > 0".into());
    let weak = check("beta_nondecreasing", first_where(rs, |r| beta.derivative(r) < 0.0), "beta'(r) >= 0".into());

    let mut d_bad = None;
    let mut d_max = 0.0f64;
    for x in &probes.x_points {
        let v = drift.eval(x);
        let norm = v[..dim].iter().map(|c| c * c).sum::<f64>().sqrt();
        d_max = d_max.max(norm);
        if d_bad.is_none() && norm > drift.sup_bound * (1.0 + 1e-12) + 1e-300 {
            d_bad = Some(x.clone());
        }
    }
    let d_bounded = check("drift_bounded", d_bad, format!("declared {:.4e}, probed {d_max:.4e}", drift.sup_bound));

    let b_sup = b.sup_bound;
    let b_bounded = check(
        "b_bounded_continuous",
        match b_sup {
            Some(sup) => first_where(rs, |r| b.eval(r).abs() > sup * (1.0 + 1e-12)),
            None => Some(vec![r_max]),
        },
        format!("declared sup {b_sup:?}"),
    );
    let b_nonneg = check("b_nonnegative", first_where(rs, |r| b.eval(r) < 0.0), "b >= 0".into());
    let div_ok = match drift.divergence.as_ref() {
        Some(div) => {
            let wit = probes.x_points.iter().find(|x| (-div(x)).max(0.0) > drift.div_minus_sup * (1.0 + 1e-12) + 1e-12).cloned();
            check("div_minus_bounded", wit, format!("declared {:.4e}", drift.div_minus_sup))
        }
        None => check("div_minus_bounded", None, "no divergence supplied; declared bound used".into()),
    };
    let (b_def, b_wit) = b.derivative_defect(&deriv_probes);
    let b_c1 = check("b_c1", (b_def > 1e-6).then(|| vec![b_wit]), format!("derivative defect {b_def:.2e}"));

    let mut checks = Vec::new();
    let admissible;
    match mode {
        ValidationMode::Existence => {
            let group = |name: &str, parts: &[&HypothesisCheck]| {
                let failed = parts.iter().find(|c| !c.passed);
                HypothesisCheck {
                    name: name.into(),
                    passed: failed.is_none(),
                    witness: failed.and_then(|c| c.witness.clone()),
                    detail: failed.map(|c| format!("{}: {}", c.name, c.detail)).unwrap_or_default(),
                }
            };
            checks.push(group("(i)", &[&beta_c1, &beta_lip, &strict_off_zero]));
            checks.push(group("(ii)", &[&d_bounded]));
            checks.push(group("(iii)", &[&b_bounded]));
            checks.push(group("(iv)", &[&div_ok, &b_nonneg]));
            admissible = checks.iter().all(|c| c.passed);
            checks.extend([beta_c1, beta_lip, strict_off_zero, d_bounded, b_bounded, div_ok, b_nonneg]);
        }
        ValidationMode::Uniqueness => {
            let j = strict.passed && beta_c1.passed && beta_zero.passed;
            let jp = weak.passed && beta_c1.passed && beta_zero.passed;
            let witness_j = strict.witness.clone().or(beta_c1.witness.clone()).or(beta_zero.witness.clone());
            let witness_jp = weak.witness.clone().or(beta_c1.witness.clone()).or(beta_zero.witness.clone());
            checks.push(HypothesisCheck { name: "(j)".into(), passed: j, witness: if j { None } else { witness_j }, detail: "beta C1, beta' > 0, beta(0) = 0".into() });
            checks.push(HypothesisCheck {
                name: "(j)'".into(),
                passed: jp,
                witness: if jp { None } else { witness_jp },
                detail: format!("beta C1, beta' >= 0, beta(0) = 0; usable only with D = 0 (D = 0: {})", drift.is_zero()),
            });
            checks.push(HypothesisCheck { name: "(jj)".into(), ..d_bounded.clone() });
            checks.push(HypothesisCheck { name: "(jjj)".into(), ..b_c1.clone() });
            admissible = (j || (drift.is_zero() && jp)) && d_bounded.passed && b_c1.passed;
            checks.extend([strict, weak, beta_c1, beta_zero, d_bounded, b_c1]);
        }
    }
    HypothesisReport { mode, checks, admissible }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn probes() -> ProbeConfig {
        ProbeConfig::uniform(1, 5.0, 4.0)
    }

    fn all_specs() -> Vec<ScalarFunctionSpec> {
        let mut v = vec![linear(1.0), linear(2.5), porous_medium(2.0), porous_medium(3.0), constant(0.7), logistic_b(2.0), inverse_quadratic()];
        let t = truncate(&porous_medium(2.0), 2.0).unwrap();
        v.push(regularize_beta(&t, 0.1));
        let (be, bs) = regularize_b(&inverse_quadratic(), 0.05);
        v.push(be);
        v.push(bs);
        let (be, bs) = regularize_b(&logistic_b(3.0), 0.2);
        v.push(be);
        v.push(bs);
        v.push(t);
        v
    }

    #[test]
    fn derivative_consistency_of_catalog_and_derived_specs() {
        let pr = derivative_probes(6.0);
        for spec in all_specs() {
            let (err, at) = spec.derivative_defect(&pr);
            assert!(err < 1e-6, "{}: {err:e} at {at}", spec.name());
        }
    }

    #[test]
    fn linear_case_passes_existence() {
        let cs = CoefficientSet::new(linear(1.0), constant(1.0), zero_drift(1), 0.75).unwrap();
        let rep = validate(&cs, ValidationMode::Existence, &probes());
        assert!(rep.all_passed(), "{rep:?}");
        for name in ["(i)", "(ii)", "(iii)", "(iv)"] {
            assert!(rep.check(name).is_some());
        }
    }

    #[test]
    fn decreasing_beta_fails_with_witness() {
        let cs = CoefficientSet::new(linear(-1.0), constant(1.0), zero_drift(1), 0.75).unwrap();
        let rep = validate(&cs, ValidationMode::Existence, &probes());
        let c = rep.check("(i)").unwrap();
        assert!(!c.passed);
        let r = c.witness.as_ref().unwrap()[0];
        assert!(cs.beta.derivative(r) < 0.0 || r != r);
    }

    #[test]
    fn porous_medium_uniqueness_modes() {
        let cs = CoefficientSet::new(porous_medium(2.0), constant(0.0), zero_drift(1), 0.75).unwrap();
        let rep = validate(&cs, ValidationMode::Uniqueness, &probes());
        let j = rep.check("(j)").unwrap();
        assert!(!j.passed);
        assert_eq!(j.witness.as_deref(), Some(&[0.0][..]));
        assert!(rep.check("(j)'").unwrap().passed);
        assert!(rep.admissible);
        let with_drift = CoefficientSet::new(porous_medium(2.0), constant(0.5), constant_d(&[0.3]), 0.75).unwrap();
        assert!(!validate(&with_drift, ValidationMode::Uniqueness, &probes()).admissible);
    }

    #[test]
    fn order_restrictions() {
        assert!(CoefficientSet::new(linear(1.0), constant(1.0), zero_drift(1), 0.3).is_ok());
        assert!(CoefficientSet::new(linear(1.0), constant(1.0), constant_d(&[1.0]), 0.3).is_err());
        assert!(CoefficientSet::new(linear(1.0), constant(1.0), zero_drift(1), 1.0).is_err());
    }

    #[test]
    fn beta_regularization() {
        let z = regularize_beta(&constant(0.0), 0.1);
        assert!((z.eval(3.0) - 0.3).abs() < 1e-15);
        let p = porous_medium(2.0);
        let pe = regularize_beta(&p, 0.01);
        assert_eq!(pe.eval(0.0), p.eval(0.0));
        assert!(pe.min_slope_on(5.0) >= 0.01);
        let t = truncate(&p, 2.0).unwrap();
        let lip = t.lipschitz_bound.unwrap();
        for eps in [1.0, 0.5, 0.01] {
            let te = regularize_beta(&t, eps);
            for r in probe_grid(10.0, 201) {
                assert!(te.eval(r).abs() <= (lip + 1.0) * r.abs() + 1e-12);
            }
        }
        for eps in [0.1, 0.01, 0.001] {
            let te = regularize_beta(&t, eps);
            let rs = probe_grid(5.0, 101);
            let dev = rs.iter().map(|&r| (te.eval(r) - t.eval(r)).abs()).fold(0.0, f64::max);
            assert!(dev <= eps * 5.0 + 1e-14);
        }
    }

    #[test]
    fn mollifier_is_normalized_and_table_matches_adaptive() {
        let one = mollify(&|_| 1.0, 0.3, 0.7);
        assert!((one - 1.0).abs() < 1e-14);
        let b = inverse_quadratic();
        let bb = b.clone();
        for eps in [1.0, 0.1, 0.01] {
            for r in [-3.0, -0.2, 0.0, 0.5, 4.0] {
                let bc = bb.clone();
                let t = mollify(&move |x| bc.eval(x), eps, r);
                let a = mollify_adaptive(|x| b.eval(x), eps, r, 1e-13).unwrap();
                assert!((t - a).abs() < 1e-10, "eps {eps} r {r}: {t} vs {a}");
            }
        }
        assert!((mollifier_fourier(0.0) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn b_regularization() {
        let (be, bs) = regularize_b(&constant(0.8), 0.1);
        for r in [-5.0, 0.0, 2.0] {
            assert!((be.eval(r) - 0.8 / (1.0 + 0.1 * r.abs())).abs() < 1e-14);
        }
        assert_eq!(bs.eval(0.0), 0.0);
        for b in [inverse_quadratic(), logistic_b(4.0)] {
            let sup = b.sup_bound.unwrap();
            for eps in [0.5, 0.05] {
                let (be, bs) = regularize_b(&b, eps);
                for r in probe_grid(20.0, 801) {
                    assert!(be.eval(r).abs() <= sup * (1.0 + 1e-13));
                }
                let l = bs.lipschitz_bound.unwrap();
                assert!(bs.lipschitz_on(50.0) <= l);
            }
        }
    }

    #[test]
    fn cutoff_drift() {
        let d = sine_d(2, 0.5, 1.3);
        let eps = 0.25;
        let dc = cutoff_d(&d, eps);
        let inside = [1.0, 2.0];
        assert_eq!(dc.eval(&inside), d.eval(&inside));
        assert_eq!(dc.eval(&[6.5, 0.3]), [0.0; 3]);
        for x in ProbeConfig::uniform(2, 1.0, 8.0).x_points {
            let a = dc.eval(&x);
            let b = d.eval(&x);
            assert!(a[0].hypot(a[1]) <= b[0].hypot(b[1]) + 1e-15);
            let (_, g) = cutoff_profile(eps, &x);
            assert!(g[0].hypot(g[1]) <= 1.0);
        }
        // divergence of the cut field against central differences
        let x = [4.3, 0.7];
        let h = 1e-5;
        let fd = (dc.eval(&[x[0] + h, x[1]])[0] - dc.eval(&[x[0] - h, x[1]])[0]) / (2.0 * h)
            + (dc.eval(&[x[0], x[1] + h])[1] - dc.eval(&[x[0], x[1] - h])[1]) / (2.0 * h);
        assert!((dc.divergence(&x).unwrap() - fd).abs() < 1e-7);
    }

    #[test]
    fn truncation() {
        let p = porous_medium(2.0);
        let n = 2.0;
        let t = truncate(&p, n).unwrap();
        for r in probe_grid(n, 41) {
            assert_eq!(t.eval(r), p.eval(r));
        }
        assert_eq!(t.eval(n + 1.0), p.derivative(n) + p.eval(n));
        for edge in [n, -n] {
            assert!((t.eval(edge + 1e-13) - t.eval(edge - 1e-13)).abs() < 1e-12);
            assert!((t.derivative(edge + 1e-13) - t.derivative(edge - 1e-13)).abs() < 1e-12);
        }
        let t2 = truncate(&t, 3.0).unwrap();
        for r in probe_grid(n, 41) {
            assert_eq!(t2.eval(r), t.eval(r));
        }
        let l = linear(1.0);
        let tl = truncate(&l, 1.0).unwrap();
        assert!(tl.min_slope_on(10.0) >= 1.0);
        assert!(truncate(&l, 0.0).is_err());
    }

    #[test]
    fn lambda0_reading() {
        let xs = ProbeConfig::uniform(1, 1.0, 4.0).x_points;
        let cs = CoefficientSet::new(linear(1.0), constant(0.0), zero_drift(1), 0.75).unwrap();
        assert_eq!(lambda0(&cs, &xs), f64::INFINITY);
        let cs = CoefficientSet::new(linear(1.0), constant(1.0), constant_d(&[1.0]), 0.75).unwrap();
        assert!((lambda0(&cs, &xs) - 0.5).abs() < 1e-15);
        let cs2 = CoefficientSet::new(linear(1.0), constant(2.0), constant_d(&[1.0]), 0.75).unwrap();
        assert!(lambda0(&cs2, &xs) < lambda0(&cs, &xs));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn truncated_porous_slope_bounds(m in 1.2f64..4.0, n in 0.5f64..3.0, r in -20.0f64..20.0) {
            let t = truncate(&porous_medium(m), n).unwrap();
            let slope = t.derivative(r);
            prop_assert!(slope >= 0.0);
            prop_assert!(slope <= t.lipschitz_bound.unwrap() * (1.0 + 1e-12));
        }

        #[test]
        fn regularized_b_star_vanishes_at_zero_and_is_bounded_by_slope(eps in 0.01f64..1.0, r in -30.0f64..30.0) {
            let (be, bs) = regularize_b(&logistic_b(1.5), eps);
            prop_assert_eq!(bs.eval(0.0), 0.0);
            prop_assert!((bs.eval(r) - be.eval(r) * r).abs() < 1e-13 * r.abs().max(1.0));
            prop_assert!(bs.eval(r).abs() <= r.abs());
        }
    }
}

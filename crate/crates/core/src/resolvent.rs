//! Resolvent `J_λ(f)`: solves `y + λ(εI−Δ)^s β_ε(y) + λ div(D_ε b*_ε(y)) = f`.
//!
//! Each ε-stage is solved in the preconditioned form obtained by applying
//! `P = (εI−Δ)^{-s}`, whose residual map is strongly monotone for
//! `λ < λ_stage(ε)`. The nonlinear solve is a damped inexact Newton–Krylov
//! iteration: GMRES on `P J` with the spectral right preconditioner
//! `(P(1 + λ m̄ B))^{-1}`, `m̄` the mean of `β_ε'(y)`, and step halving until
//! `|P F(y)|_2` decreases. Larger `λ` are reached by the fixed-point iteration
//! `y ← J_{λ1}((1−λ1/λ) y + (λ1/λ) f)` with safeguarded Anderson mixing.
//!
//! [`resolvent_j`] runs the ε-schedule and finishes with an `ε = 0` stage,
//! `y + λ(−Δ)^s β(y) + λ div(D b(y) y) = f`, warm-started from the last ε.

use std::rc::Rc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coefficients::{self, CoefficientSet, ScalarFunctionSpec};
use crate::krylov::gmres;
use crate::spectral::{Field, Grid, SpectralContext, SpectralError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("no convergence after {iterations} iterations (l1 residual {residual:e})")]
    NoConvergence { best: Box<Field>, residual: f64, iterations: usize },
    #[error("lambda = {lambda:e} is not below the stage bound {stage_bound:e} and chaining is disabled")]
    StageBoundExceeded { lambda: f64, stage_bound: f64 },
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResolventControls {
    /// Newton iterations per stage solve.
    pub max_iter: usize,
    /// First trial step length of the line search.
    pub damping: f64,
    pub tol_l1: f64,
    pub gmres_rtol: f64,
    pub gmres_restart: usize,
    pub gmres_max_iter: usize,
    pub chaining: bool,
    /// `λ1 = chain_fraction · λ_stage`.
    pub chain_fraction: f64,
    pub chain_max_outer: usize,
    pub anderson_depth: usize,
    pub dealias: bool,
    pub eps_schedule: Vec<f64>,
    pub degenerate_eps_floor: f64,
    /// Finish [`resolvent_j`] with the `ε = 0` equation.
    pub limit_stage: bool,
}

impl Default for ResolventControls {
    fn default() -> Self {
        ResolventControls {
            max_iter: 100,
            damping: 1.0,
            tol_l1: 1e-11,
            gmres_rtol: 1e-4,
            gmres_restart: 60,
            gmres_max_iter: 600,
            chaining: true,
            chain_fraction: 0.9,
            chain_max_outer: 2000,
            anderson_depth: 6,
            dealias: false,
            eps_schedule: vec![1e-2, 1e-3, 1e-4],
            degenerate_eps_floor: 1e-3,
            limit_stage: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRecord {
    pub lambda1: f64,
    pub stage_bound: f64,
    pub outer_iterations: usize,
    /// l1 residual of the full-λ equation after each outer step.
    pub residuals: Vec<f64>,
    /// `|y_{k+1} − y_k|_1` of successive outer iterates.
    pub increments: Vec<f64>,
    pub anderson_resets: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolventSolution {
    pub y: Field,
    pub lambda: f64,
    /// Regularization of the stage; 0 for the limit equation.
    pub eps: f64,
    pub iterations: usize,
    pub residual_l1: f64,
    pub residual_precond_l2: f64,
    /// `|P F|_2` after every accepted Newton step of the final stage solve.
    pub merit_history: Vec<f64>,
    pub gmres_iterations: usize,
    pub chain: Option<ChainRecord>,
}

#[derive(Debug, Clone)]
pub struct ResolventProblem<'a> {
    pub f: &'a Field,
    pub lambda: f64,
    pub eps: f64,
    pub cs: &'a CoefficientSet,
    pub controls: &'a ResolventControls,
    pub initial_guess: Option<&'a Field>,
}

// ---------------------------------------------------------------------------

/// Discrete operator of one stage, sampled on the grid.
struct StageOperator {
    ctx: Rc<SpectralContext>,
    grid: Grid,
    lambda: f64,
    eps: f64,
    beta: ScalarFunctionSpec,
    bstar: Option<ScalarFunctionSpec>,
    drift: Vec<Vec<f64>>,
    b_mult: Vec<f64>,
    p_mult: Vec<f64>,
    dealias: bool,
}

impl StageOperator {
    /// `eps > 0`: regularized stage. `eps == 0`: limit equation preconditioned with `(eps_p I − Δ)^{-s}`.
    fn new(cs: &CoefficientSet, grid: Grid, lambda: f64, eps: f64, eps_p: f64, dealias: bool) -> Self {
        let ctx = SpectralContext::get(&grid);
        let s = cs.s;
        let (beta, bstar, drift_spec) = if eps > 0.0 {
            let beta = coefficients::regularize_beta(&cs.beta, eps);
            let (_, bstar) = coefficients::regularize_b(&cs.b, eps);
            (beta, bstar, coefficients::cutoff_d(&cs.drift, eps))
        } else {
            (cs.beta.clone(), cs.b_star(), cs.drift.clone())
        };
        let has_drift = !cs.drift.is_zero();
        let drift = if has_drift {
            let mut comps = vec![Vec::with_capacity(grid.len()); grid.dim];
            for i in 0..grid.len() {
                let v = drift_spec.eval(&grid.point(i)[..grid.dim]);
                for (a, c) in comps.iter_mut().enumerate() {
                    c.push(v[a]);
                }
            }
            comps
        } else {
            Vec::new()
        };
        let b_mult = if eps > 0.0 {
            ctx.radial_table(|k2| (eps + k2).powf(s))
        } else {
            ctx.radial_table(|k2| if k2 == 0.0 { 0.0 } else { k2.powf(s) })
        };
        let p_mult = ctx.radial_table(|k2| (eps_p + k2).powf(-s));
        StageOperator {
            ctx,
            grid,
            lambda,
            eps,
            beta,
            bstar: has_drift.then_some(bstar),
            drift,
            b_mult,
            p_mult,
            dealias,
        }
    }

    fn maybe_dealias(&self, v: Vec<f64>) -> Vec<f64> {
        if self.dealias {
            self.ctx.dealias(&v)
        } else {
            v
        }
    }

    /// `y + λ(B a + div(D c))` for pointwise arrays `a`, `c`.
    fn combine(&self, y: &[f64], a: Vec<f64>, c: Option<Vec<f64>>) -> Vec<f64> {
        let a = self.maybe_dealias(a);
        let mut spec = self.ctx.dft(&a);
        for (z, m) in spec.iter_mut().zip(&self.b_mult) {
            *z *= *m;
        }
        if let Some(c) = c {
            let c = self.maybe_dealias(c);
            for (axis, comp) in self.drift.iter().enumerate() {
                let flux: Vec<f64> = comp.iter().zip(&c).map(|(d, v)| d * v).collect();
                let fs = self.ctx.dft(&flux);
                for ((z, w), k) in spec.iter_mut().zip(&fs).zip(self.ctx.xi_deriv(axis)) {
                    *z += w * Complex64::new(0.0, *k);
                }
            }
        }
        let op = self.ctx.idft_real(spec);
        y.iter().zip(&op).map(|(yi, oi)| yi + self.lambda * oi).collect()
    }

    fn residual(&self, y: &[f64], f: &[f64]) -> Vec<f64> {
        let a: Vec<f64> = y.iter().map(|&v| self.beta.eval(v)).collect();
        let c = self.bstar.as_ref().map(|bs| y.iter().map(|&v| bs.eval(v)).collect());
        let mut r = self.combine(y, a, c);
        for (ri, fi) in r.iter_mut().zip(f) {
            *ri -= fi;
        }
        r
    }

    fn precondition(&self, r: &[f64]) -> Vec<f64> {
        self.ctx.filter(r, &self.p_mult)
    }

    fn l2(&self, v: &[f64]) -> f64 {
        (v.iter().map(|x| x * x).sum::<f64>() * self.grid.cell_volume()).sqrt()
    }

    fn l1(&self, v: &[f64]) -> f64 {
        v.iter().map(|x| x.abs()).sum::<f64>() * self.grid.cell_volume()
    }
}

struct StageOutcome {
    y: Vec<f64>,
    iterations: usize,
    residual_l1: f64,
    merit: f64,
    merit_history: Vec<f64>,
    gmres_iterations: usize,
}

/// Damped Newton–Krylov on `P F(y) = 0` for one stage operator.
fn newton(op: &StageOperator, f: &[f64], init: &[f64], controls: &ResolventControls, tol: f64) -> Result<StageOutcome, SolverError> {
    let lambda = op.lambda;
    let mut y = init.to_vec();
    let mut fres = op.residual(&y, f);
    let mut g = op.precondition(&fres);
    let mut merit = op.l2(&g);
    let mut history = vec![merit];
    let mut gmres_total = 0;
    let mut r1 = op.l1(&fres);
    for it in 0..controls.max_iter {
        if r1 <= tol {
            return Ok(StageOutcome { y, iterations: it, residual_l1: r1, merit, merit_history: history, gmres_iterations: gmres_total });
        }
        let dbeta: Vec<f64> = y.iter().map(|&v| op.beta.derivative(v)).collect();
        let dbstar: Option<Vec<f64>> = op.bstar.as_ref().map(|bs| y.iter().map(|&v| bs.derivative(v)).collect());
        let mbar = dbeta.iter().sum::<f64>() / dbeta.len() as f64;
        let r_mult: Vec<f64> = op.p_mult.iter().zip(&op.b_mult).map(|(p, b)| 1.0 / (p * (1.0 + lambda * mbar * b))).collect();
        let apply = |z: &[f64]| -> Vec<f64> {
            let v = op.ctx.filter(z, &r_mult);
            let a: Vec<f64> = v.iter().zip(&dbeta).map(|(vi, di)| vi * di).collect();
            let c = dbstar.as_ref().map(|ds| v.iter().zip(ds).map(|(vi, di)| vi * di).collect());
            let jv = op.combine(&v, a, c);
            op.precondition(&jv)
        };
        let rhs: Vec<f64> = g.iter().map(|x| -x).collect();
        let (z, info) = gmres(apply, &rhs, controls.gmres_rtol, controls.gmres_restart, controls.gmres_max_iter);
        gmres_total += info.iterations;
        let delta = op.ctx.filter(&z, &r_mult);
        let mut omega = controls.damping;
        let mut accepted = false;
        while omega > 1e-12 {
            let trial: Vec<f64> = y.iter().zip(&delta).map(|(a, d)| a + omega * d).collect();
            let ftrial = op.residual(&trial, f);
            let gtrial = op.precondition(&ftrial);
            let mtrial = op.l2(&gtrial);
            if mtrial < merit {
                y = trial;
                fres = ftrial;
                g = gtrial;
                merit = mtrial;
                accepted = true;
                break;
            }
            omega *= 0.5;
        }
        r1 = op.l1(&fres);
        if !accepted {
            // Merit at its rounding floor; accept if the raw residual is already within reach.
            if r1 <= tol {
                break;
            }
            return Err(SolverError::NoConvergence {
                best: Box::new(Field::new(op.grid, y)?),
                residual: r1,
                iterations: it + 1,
            });
        }
        history.push(merit);
    }
    if r1 <= tol {
        let iterations = history.len() - 1;
        return Ok(StageOutcome { y, iterations, residual_l1: r1, merit, merit_history: history, gmres_iterations: gmres_total });
    }
    Err(SolverError::NoConvergence { best: Box::new(Field::new(op.grid, y)?), residual: r1, iterations: controls.max_iter })
}

// ---------------------------------------------------------------------------

fn check_lambda(lambda: f64) -> Result<(), SolverError> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(SolverError::InvalidProblem(format!("lambda = {lambda} must be positive and finite")));
    }
    Ok(())
}

/// Radius of the a priori sup bound `(1 + M^{1/2}) |f|_∞`, slightly inflated.
fn solution_radius(f: &Field, cs: &CoefficientSet) -> f64 {
    let g = f.grid();
    let probes: Vec<Vec<f64>> = (0..g.len()).map(|i| g.point(i)[..g.dim].to_vec()).collect();
    let m = cs.drift.m_constant(&probes);
    ((1.0 + m.sqrt()) * f.linf() * 1.05).max(1e-8)
}

/// `λ_stage(ε) = 1/(2 c)` with `c = min(K Ξ^{1/2}, K² Ξ^{1−s}/(4α))`,
/// `K = |D_ε|_∞ Lip(b*_ε)`, `α = min β_ε'` on the a priori range and `Ξ = ε + max|ξ|²`.
/// For `ε = 0` the limit operators are used with `Ξ = max|ξ|²`.
pub fn stage_bound(f: &Field, eps: f64, cs: &CoefficientSet) -> f64 {
    if cs.drift.is_zero() {
        return f64::INFINITY;
    }
    let g = f.grid();
    let radius = solution_radius(f, cs);
    let (beta, bstar, drift) = if eps > 0.0 {
        let (_, bs) = coefficients::regularize_b(&cs.b, eps);
        (coefficients::regularize_beta(&cs.beta, eps), bs, coefficients::cutoff_d(&cs.drift, eps))
    } else {
        (cs.beta.clone(), cs.b_star(), cs.drift.clone())
    };
    let dsup = (0..g.len())
        .map(|i| {
            let v = drift.eval(&g.point(i)[..g.dim]);
            v[..g.dim].iter().map(|c| c * c).sum::<f64>().sqrt()
        })
        .fold(0.0, f64::max);
    let k = dsup * bstar.lipschitz_on(radius) * 1.05;
    if k == 0.0 {
        return f64::INFINITY;
    }
    let xi = eps + g.xi_max_sq();
    let alpha = beta.min_slope_on(radius);
    let c1 = k * xi.sqrt();
    let c2 = if alpha > 0.0 { k * k * xi.powf(1.0 - cs.s) / (4.0 * alpha) } else { f64::INFINITY };
    1.0 / (2.0 * c1.min(c2))
}

fn solution(op: &StageOperator, out: StageOutcome, chain: Option<ChainRecord>) -> Result<ResolventSolution, SolverError> {
    Ok(ResolventSolution {
        y: Field::new(op.grid, out.y)?,
        lambda: op.lambda,
        eps: op.eps,
        iterations: out.iterations,
        residual_l1: out.residual_l1,
        residual_precond_l2: out.merit,
        merit_history: out.merit_history,
        gmres_iterations: out.gmres_iterations,
        chain,
    })
}

/// Solves one ε-stage directly; `λ` must be below [`stage_bound`] unless chaining is enabled,
/// in which case larger `λ` are delegated to [`solve_chained`].
pub fn solve_preconditioned(p: &ResolventProblem<'_>) -> Result<ResolventSolution, SolverError> {
    check_lambda(p.lambda)?;
    if !(p.eps > 0.0 && p.eps <= 1.0) {
        return Err(SolverError::InvalidProblem(format!("eps = {} must lie in (0, 1]", p.eps)));
    }
    let bound = stage_bound(p.f, p.eps, p.cs);
    if p.lambda >= bound {
        if p.controls.chaining {
            return solve_chained(p.f, p.lambda, p.eps, p.cs, p.controls, p.initial_guess);
        }
        return Err(SolverError::StageBoundExceeded { lambda: p.lambda, stage_bound: bound });
    }
    let op = StageOperator::new(p.cs, *p.f.grid(), p.lambda, p.eps, p.eps, p.controls.dealias);
    let init = p.initial_guess.unwrap_or(p.f);
    let out = newton(&op, p.f.values(), init.values(), p.controls, p.controls.tol_l1)?;
    solution(&op, out, None)
}

/// The contraction `T(y) = J_{λ1}((1 − λ1/λ) y + (λ1/λ) f)` at regularization `eps`.
pub fn chain_map(
    y: &Field,
    f: &Field,
    lambda: f64,
    lambda1: f64,
    eps: f64,
    cs: &CoefficientSet,
    controls: &ResolventControls,
) -> Result<Field, SolverError> {
    let q = lambda1 / lambda;
    let input = y.lincomb(1.0 - q, f, q);
    let op = StageOperator::new(cs, *f.grid(), lambda1, eps, eps, controls.dealias);
    let out = newton(&op, input.values(), y.values(), controls, controls.tol_l1)?;
    Ok(Field::new(*f.grid(), out.y)?)
}

/// Least-squares coefficients of Anderson mixing via regularized normal equations.
fn anderson_coefficients(df: &[Vec<f64>], fk: &[f64]) -> Option<Vec<f64>> {
    let m = df.len();
    let mut a = vec![vec![0.0; m]; m];
    let mut rhs = vec![0.0; m];
    for i in 0..m {
        for j in 0..m {
            a[i][j] = df[i].iter().zip(&df[j]).map(|(x, y)| x * y).sum();
        }
        rhs[i] = df[i].iter().zip(fk).map(|(x, y)| x * y).sum();
    }
    let trace: f64 = (0..m).map(|i| a[i][i]).sum();
    if trace == 0.0 {
        return None;
    }
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += 1e-12 * trace;
    }
    // Gaussian elimination with partial pivoting.
    for col in 0..m {
        let piv = (col..m).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col] == 0.0 {
            return None;
        }
        a.swap(col, piv);
        rhs.swap(col, piv);
        for row in col + 1..m {
            let factor = a[row][col] / a[col][col];
            for k in col..m {
                a[row][k] -= factor * a[col][k];
            }
            rhs[row] -= factor * rhs[col];
        }
    }
    let mut x = vec![0.0; m];
    for i in (0..m).rev() {
        let s: f64 = (i + 1..m).map(|k| a[i][k] * x[k]).sum();
        x[i] = (rhs[i] - s) / a[i][i];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

fn chained_core(
    f: &Field,
    lambda: f64,
    eps: f64,
    eps_p: f64,
    cs: &CoefficientSet,
    controls: &ResolventControls,
    init: Option<&Field>,
) -> Result<ResolventSolution, SolverError> {
    let grid = *f.grid();
    let bound = stage_bound(f, eps, cs);
    let full = StageOperator::new(cs, grid, lambda, eps, eps_p, controls.dealias);
    let start = init.unwrap_or(f).values().to_vec();
    if lambda < bound {
        let out = newton(&full, f.values(), &start, controls, controls.tol_l1)?;
        return solution(&full, out, None);
    }
    if !controls.chaining {
        return Err(SolverError::StageBoundExceeded { lambda, stage_bound: bound });
    }
    let lambda1 = controls.chain_fraction * bound;
    let q = lambda1 / lambda;
    let inner_tol = (0.25 * q * controls.tol_l1).max(1e-15);
    let stage = StageOperator::new(cs, grid, lambda1, eps, eps_p, controls.dealias);
    let mut record = ChainRecord {
        lambda1,
        stage_bound: bound,
        outer_iterations: 0,
        residuals: Vec::new(),
        increments: Vec::new(),
        anderson_resets: 0,
    };
    let fv = f.values();
    let mut x = start;
    let mut xs: Vec<Vec<f64>> = Vec::new();
    let mut gs: Vec<Vec<f64>> = Vec::new();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut last_out: Option<StageOutcome> = None;
    let mut prev_y: Option<Vec<f64>> = None;
    for k in 0..controls.chain_max_outer {
        let input: Vec<f64> = x.iter().zip(fv).map(|(xi, fi)| (1.0 - q) * xi + q * fi).collect();
        let warm = prev_y.as_deref().unwrap_or(&x).to_vec();
        let out = match newton(&stage, &input, &warm, controls, inner_tol) {
            Ok(out) => out,
            // Inner solve stalled at rounding level; the outer residual decides.
            Err(SolverError::NoConvergence { best, residual, iterations }) if residual <= controls.tol_l1 => {
                let y = best.values().to_vec();
                let merit = stage.l2(&stage.precondition(&stage.residual(&y, &input)));
                StageOutcome { y, iterations, residual_l1: residual, merit, merit_history: vec![merit], gmres_iterations: 0 }
            }
            Err(e) => return Err(e),
        };
        let y = out.y.clone();
        let res = full.l1(&full.residual(&y, fv));
        record.residuals.push(res);
        if let Some(p) = &prev_y {
            record.increments.push(full.l1(&y.iter().zip(p).map(|(a, b)| a - b).collect::<Vec<_>>()));
        }
        record.outer_iterations = k + 1;
        if res <= controls.tol_l1 {
            let merit = full.l2(&full.precondition(&full.residual(&y, fv)));
            let outcome = StageOutcome { y, iterations: out.iterations, residual_l1: res, merit, merit_history: out.merit_history, gmres_iterations: out.gmres_iterations };
            let mut sol = solution(&full, outcome, Some(record))?;
            sol.lambda = lambda;
            return Ok(sol);
        }
        let improved = best.as_ref().is_none_or(|(b, _)| res < *b);
        if improved {
            best = Some((res, y.clone()));
        } else if !xs.is_empty() {
            record.anderson_resets += 1;
            xs.clear();
            gs.clear();
            x = best.as_ref().map(|(_, b)| b.clone()).unwrap_or(y.clone());
            prev_y = Some(y);
            continue;
        }
        xs.push(x.clone());
        gs.push(y.clone());
        if xs.len() > controls.anderson_depth + 1 {
            xs.remove(0);
            gs.remove(0);
        }
        x = if controls.anderson_depth > 0 && xs.len() >= 2 {
            let fvec: Vec<Vec<f64>> = xs.iter().zip(&gs).map(|(a, b)| b.iter().zip(a).map(|(bi, ai)| bi - ai).collect()).collect();
            let m = xs.len() - 1;
            let df: Vec<Vec<f64>> = (0..m).map(|i| fvec[i + 1].iter().zip(&fvec[i]).map(|(a, b)| a - b).collect()).collect();
            match anderson_coefficients(&df, &fvec[m]) {
                Some(gamma) => {
                    let mut next = gs[m].clone();
                    for (i, gi) in gamma.iter().enumerate() {
                        for ((n, a), b) in next.iter_mut().zip(&gs[i + 1]).zip(&gs[i]) {
                            *n -= gi * (a - b);
                        }
                    }
                    next
                }
                None => y.clone(),
            }
        } else {
            y.clone()
        };
        prev_y = Some(y);
        last_out = Some(out);
    }
    let _ = last_out;
    let (res, y) = best.unwrap_or((f64::INFINITY, x));
    Err(SolverError::NoConvergence { best: Box::new(Field::new(grid, y)?), residual: res, iterations: controls.chain_max_outer })
}

/// Solves the stage equation at any `λ > 0`; below the stage bound this is a single direct solve.
pub fn solve_chained(
    f: &Field,
    lambda: f64,
    eps: f64,
    cs: &CoefficientSet,
    controls: &ResolventControls,
    init: Option<&Field>,
) -> Result<ResolventSolution, SolverError> {
    check_lambda(lambda)?;
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(SolverError::InvalidProblem(format!("eps = {eps} must lie in (0, 1]")));
    }
    chained_core(f, lambda, eps, eps, cs, &ResolventControls { chaining: true, ..controls.clone() }, init)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolventJ {
    pub y: Field,
    /// One entry per stage, in order; the last one is the returned iterate.
    pub stages: Vec<ResolventSolution>,
    /// `|y_{stage k+1} − y_{stage k}|_1`.
    pub stage_increments: Vec<f64>,
    pub warnings: Vec<String>,
}

impl ResolventJ {
    pub fn last(&self) -> &ResolventSolution {
        self.stages.last().expect("at least one stage")
    }
}

/// Whether `β` has a vanishing slope somewhere on the range `[-radius, radius]`.
pub fn is_degenerate(beta: &ScalarFunctionSpec, radius: f64) -> bool {
    beta.min_slope_on(radius) <= 0.0 || beta.derivative(0.0) <= 0.0
}

/// Effective ε-schedule: the configured one, floored for degenerate `β`.
pub fn effective_schedule(f: &Field, cs: &CoefficientSet, controls: &ResolventControls) -> Vec<f64> {
    let degenerate = is_degenerate(&cs.beta, solution_radius(f, cs));
    controls.eps_schedule.iter().copied().filter(|&e| !degenerate || e >= controls.degenerate_eps_floor).collect()
}

/// `J_λ(f)` along the ε-schedule, finishing with the `ε = 0` equation when enabled.
pub fn resolvent_j(f: &Field, lambda: f64, cs: &CoefficientSet, controls: &ResolventControls) -> Result<ResolventJ, SolverError> {
    check_lambda(lambda)?;
    let g = f.grid();
    let mut warnings = Vec::new();
    let probes: Vec<Vec<f64>> = (0..g.len()).map(|i| g.point(i)[..g.dim].to_vec()).collect();
    let l0 = coefficients::lambda0(cs, &probes);
    if lambda >= l0 {
        warnings.push(format!("lambda = {lambda:e} is not below lambda0 = {l0:e}"));
    }
    let schedule = effective_schedule(f, cs, controls);
    if schedule.is_empty() && !controls.limit_stage {
        return Err(SolverError::InvalidProblem("empty eps schedule without limit stage".into()));
    }
    let mut stages: Vec<ResolventSolution> = Vec::new();
    let mut increments = Vec::new();
    for &eps in &schedule {
        let init = stages.last().map(|s| &s.y);
        let sol = chained_core(f, lambda, eps, eps, cs, controls, init)?;
        if let Some(prev) = stages.last() {
            increments.push(prev.y.l1_distance(&sol.y));
        }
        stages.push(sol);
    }
    if controls.limit_stage {
        let eps_p = schedule.last().copied().unwrap_or(controls.degenerate_eps_floor);
        let init = stages.last().map(|s| &s.y);
        let sol = chained_core(f, lambda, 0.0, eps_p, cs, controls, init)?;
        if let Some(prev) = stages.last() {
            increments.push(prev.y.l1_distance(&sol.y));
        }
        stages.push(sol);
    }
    let y = stages.last().expect("nonempty").y.clone();
    Ok(ResolventJ { y, stages, stage_increments: increments, warnings })
}

/// l1 defect of `J_{λ2}(f) = J_{λ1}((λ1/λ2) f + (1 − λ1/λ2) J_{λ2}(f))`.
pub fn check_resolvent_identity(
    f: &Field,
    lambda1: f64,
    lambda2: f64,
    cs: &CoefficientSet,
    controls: &ResolventControls,
) -> Result<f64, SolverError> {
    let j2 = resolvent_j(f, lambda2, cs, controls)?.y;
    let q = lambda1 / lambda2;
    let arg = f.lincomb(q, &j2, 1.0 - q);
    let rhs = resolvent_j(&arg, lambda1, cs, controls)?.y;
    Ok(j2.l1_distance(&rhs))
}

/// Raw l1 residual of the stage equation at `(λ, ε)` (`ε = 0`: limit equation).
pub fn stage_residual_l1(y: &Field, f: &Field, lambda: f64, eps: f64, cs: &CoefficientSet, dealias: bool) -> f64 {
    let op = StageOperator::new(cs, *f.grid(), lambda, eps, eps.max(1e-3), dealias);
    op.l1(&op.residual(y.values(), f.values()))
}

/// `C = λ(|b|_∞+1)(M+2)²(Lip(β)+1)²|f|_∞|f|_1`, the bound on `|(εI−Δ)^{s/2} β_ε(y_ε)|²_2`.
pub fn regularity_constant(f: &Field, lambda: f64, cs: &CoefficientSet) -> f64 {
    let g = f.grid();
    let probes: Vec<Vec<f64>> = (0..g.len()).map(|i| g.point(i)[..g.dim].to_vec()).collect();
    let m = cs.drift.m_constant(&probes);
    let radius = solution_radius(f, cs);
    let lip = cs.beta.lipschitz_bound.unwrap_or_else(|| cs.beta.lipschitz_on(radius));
    let bsup = cs.b.sup_bound.unwrap_or_else(|| cs.b.sup_on(radius));
    lambda * (bsup + 1.0) * (m + 2.0).powi(2) * (lip + 1.0).powi(2) * f.linf() * f.l1()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::*;
    use crate::spectral;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gaussians(grid: Grid, seed: u64) -> Field {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = grid.half_width;
        let parts: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| (rng.random_range(-0.5 * l..0.5 * l), rng.random_range(0.4..1.0), rng.random_range(0.2..1.0)))
            .collect();
        Field::from_fn(grid, |x| parts.iter().map(|(c, w, a)| a * (-(x[0] - c).powi(2) / (2.0 * w * w)).exp()).sum()).unwrap()
    }

    fn porous_cs(drift: bool) -> CoefficientSet {
        let beta = truncate(&porous_medium(2.0), 2.0).unwrap();
        let d = if drift { sine_d(1, 0.2, std::f64::consts::PI / 8.0) } else { zero_drift(1) };
        CoefficientSet::new(beta, inverse_quadratic(), d, 0.75).unwrap()
    }

    fn grid() -> Grid {
        Grid::new(1, 128, 8.0).unwrap()
    }

    #[test]
    fn constant_data_reduces_to_scalar_equation() {
        let g = grid();
        let cs = CoefficientSet::new(porous_medium(2.0), constant(0.0), zero_drift(1), 0.6).unwrap();
        let (c, lambda, eps) = (0.8, 0.7, 0.05);
        let ctl = ResolventControls::default();
        let f = Field::constant(g, c);
        let sol = solve_preconditioned(&ResolventProblem { f: &f, lambda, eps, cs: &cs, controls: &ctl, initial_guess: None }).unwrap();
        // scalar Newton oracle for y + λ ε^s (y² + ε y) = c
        let k = lambda * eps.powf(0.6);
        let mut y = c;
        for _ in 0..50 {
            let h = y + k * (y * y + eps * y) - c;
            y -= h / (1.0 + k * (2.0 * y + eps));
        }
        assert!(sol.y.values().iter().all(|v| (v - y).abs() < 1e-12), "{} vs {y}", sol.y.values()[0]);
    }

    #[test]
    fn linear_case_is_a_spectral_division() {
        let g = grid();
        let cs = CoefficientSet::new(linear(1.0), constant(0.0), zero_drift(1), 0.75).unwrap();
        let f = gaussians(g, 1);
        let (lambda, eps) = (0.3, 0.01);
        let ctl = ResolventControls::default();
        let sol = solve_preconditioned(&ResolventProblem { f: &f, lambda, eps, cs: &cs, controls: &ctl, initial_guess: None }).unwrap();
        let ctx = SpectralContext::get(&g);
        let exact = Field::new(g, ctx.filter_radial(f.values(), |k2| 1.0 / (1.0 + lambda * (eps + k2).powf(0.75) * (1.0 + eps)))).unwrap();
        assert!(sol.y.l1_distance(&exact) < 1e-11);
        assert!(sol.residual_l1 <= ctl.tol_l1);
    }

    #[test]
    fn merit_decreases_and_positivity_holds() {
        let g = grid();
        let cs = porous_cs(true);
        let ctl = ResolventControls::default();
        for seed in 0..3 {
            let f = gaussians(g, 10 + seed);
            let sol = solve_chained(&f, 0.4, 1e-2, &cs, &ctl, None).unwrap();
            assert!(sol.merit_history.windows(2).all(|w| w[1] < w[0]));
            assert!(sol.y.min() >= -1e-8);
            assert!(sol.residual_l1 <= ctl.tol_l1);
        }
    }

    #[test]
    fn chain_of_length_one_matches_direct_solve() {
        let g = grid();
        let cs = porous_cs(true);
        let f = gaussians(g, 3);
        let ctl = ResolventControls::default();
        let bound = stage_bound(&f, 1e-2, &cs);
        let lambda = 0.5 * bound;
        let direct = solve_preconditioned(&ResolventProblem { f: &f, lambda, eps: 1e-2, cs: &cs, controls: &ctl, initial_guess: None }).unwrap();
        let chained = solve_chained(&f, lambda, 1e-2, &cs, &ctl, None).unwrap();
        assert!(chained.chain.is_none());
        assert!(direct.y.l1_distance(&chained.y) < 1e-11);
    }

    #[test]
    fn stage_bound_is_enforced_without_chaining() {
        let g = grid();
        let cs = porous_cs(true);
        let f = gaussians(g, 4);
        let ctl = ResolventControls { chaining: false, ..Default::default() };
        let bound = stage_bound(&f, 1e-2, &cs);
        assert!(bound.is_finite());
        let err = solve_preconditioned(&ResolventProblem { f: &f, lambda: 2.0 * bound, eps: 1e-2, cs: &cs, controls: &ctl, initial_guess: None });
        assert!(matches!(err, Err(SolverError::StageBoundExceeded { .. })));
    }

    #[test]
    fn doubling_chain_satisfies_full_equation_and_contracts() {
        let g = grid();
        let cs = porous_cs(true);
        let ctl = ResolventControls::default();
        let f = gaussians(g, 5);
        let bound = stage_bound(&f, 1e-2, &cs);
        let lambda1 = 0.9 * bound;
        let lambda = 2.0 * lambda1;
        let sol = solve_chained(&f, lambda, 1e-2, &cs, &ctl, None).unwrap();
        assert!(sol.chain.is_some());
        assert!(stage_residual_l1(&sol.y, &f, lambda, 1e-2, &cs, false) <= ctl.tol_l1);
        for seed in 0..4 {
            let y1 = gaussians(g, 100 + seed);
            let y2 = gaussians(g, 200 + seed);
            let t1 = chain_map(&y1, &f, lambda, lambda1, 1e-2, &cs, &ctl).unwrap();
            let t2 = chain_map(&y2, &f, lambda, lambda1, 1e-2, &cs, &ctl).unwrap();
            assert!(t1.l1_distance(&t2) <= (1.0 - lambda1 / lambda) * y1.l1_distance(&y2) + 1e-9);
        }
    }

    #[test]
    fn resolvent_j_conserves_mass_and_contracts() {
        let g = grid();
        let cs = porous_cs(true);
        let ctl = ResolventControls::default();
        let lambda = 0.5;
        let f1 = gaussians(g, 6);
        let f2 = gaussians(g, 7);
        let j1 = resolvent_j(&f1, lambda, &cs, &ctl).unwrap();
        let j2 = resolvent_j(&f2, lambda, &cs, &ctl).unwrap();
        assert!((j1.y.mass() - f1.mass()).abs() <= 1e-9 * f1.l1());
        assert!(j1.y.l1_distance(&j2.y) <= f1.l1_distance(&f2) + 1e-9);
        let probes: Vec<Vec<f64>> = (0..g.len()).map(|i| g.point(i)[..1].to_vec()).collect();
        let m = cs.drift.m_constant(&probes);
        assert!(j1.y.linf() <= (1.0 + m.sqrt()) * f1.linf() + 1e-9);
        assert_eq!(j1.stage_increments.len(), j1.stages.len() - 1);
    }

    #[test]
    fn order_preservation() {
        let g = grid();
        let cs = porous_cs(true);
        let ctl = ResolventControls::default();
        let f = gaussians(g, 8);
        let bump = Field::from_fn(g, |x| 0.3 * (-(x[0] - 1.0).powi(2)).exp()).unwrap();
        let fb = f.lincomb(1.0, &bump, 1.0);
        let a = resolvent_j(&f, 0.5, &cs, &ctl).unwrap().y;
        let b = resolvent_j(&fb, 0.5, &cs, &ctl).unwrap().y;
        assert!(a.values().iter().zip(b.values()).all(|(x, y)| *x <= y + 1e-9));
    }

    #[test]
    fn resolvent_identity_linear_and_porous() {
        let g = grid();
        let ctl = ResolventControls::default();
        let f = gaussians(g, 9);
        let lin = CoefficientSet::new(linear(1.0), constant(0.0), zero_drift(1), 0.75).unwrap();
        assert!(check_resolvent_identity(&f, 0.2, 0.2, &lin, &ctl).unwrap() <= ctl.tol_l1);
        assert!(check_resolvent_identity(&f, 0.1, 0.3, &lin, &ctl).unwrap() <= 1e-9);
        let por = porous_cs(false);
        assert!(check_resolvent_identity(&f, 0.15, 0.3, &por, &ctl).unwrap() <= 10.0 * ctl.tol_l1);
    }

    #[test]
    fn beta_regularity_proxy_is_below_the_constant() {
        let g = grid();
        let cs = porous_cs(true);
        let ctl = ResolventControls::default();
        let f = gaussians(g, 11);
        let lambda = 0.5;
        let c = regularity_constant(&f, lambda, &cs);
        for &eps in &[1e-2, 1e-3] {
            let y = solve_chained(&f, lambda, eps, &cs, &ctl, None).unwrap().y;
            let beps = regularize_beta(&cs.beta, eps);
            let by = y.map(|v| beps.eval(v));
            let ctx = SpectralContext::get(&g);
            let mult = ctx.radial_table(|k2| (eps + k2).powf(cs.s));
            let energy = ctx.weighted_energy(by.values(), &mult);
            assert!(energy.is_finite() && energy <= c, "{energy} vs {c}");
            assert!(spectral::hs_semi(&by, cs.s).is_finite());
        }
    }

    #[test]
    fn dealiasing_flag_runs() {
        let g = grid();
        let cs = porous_cs(false);
        let ctl = ResolventControls { dealias: true, ..Default::default() };
        let f = gaussians(g, 12);
        let j = resolvent_j(&f, 0.3, &cs, &ctl).unwrap();
        assert!((j.y.mass() - f.mass()).abs() <= 1e-9 * f.l1());
    }
}

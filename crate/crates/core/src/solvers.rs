//! Model-driven baselines: ISTA and fixed-parameter ADMM.
//!
//! Both solve `min ½‖Ax − y‖² + λ‖x‖₁` for a [`LinearOperator`] `A`. ADMM
//! uses the split `z = x` with a scaled multiplier `β`; its multiplier
//! step is `β ← β + ρ(x − z)`.

use crate::error::{Error, Result};
use crate::operator::{LinearOperator, ShiftedSolve};

const DIVERGENCE_NORM: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// ℓ1 weight `λ`.
    pub lambda: f64,
    /// ADMM penalty `ρ`.
    pub rho: f64,
    /// Gradient step `l_r`; `None` picks `0.99/‖A‖²` for ISTA.
    pub step: Option<f64>,
    pub max_iters: usize,
    /// Stop when `‖x_k − x_{k−1}‖ / ‖x_{k−1}‖ < tol`.
    pub tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            lambda: 0.1,
            rho: 0.03,
            step: None,
            max_iters: 200,
            tol: 1e-6,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.rho > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "rho must be > 0, got {}",
                self.rho
            )));
        }
        if let Some(step) = self.step {
            if !(step > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "step must be > 0, got {step}"
                )));
            }
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be >= 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "tol must be >= 0, got {}",
                self.tol
            )));
        }
        Ok(())
    }
}

/// Threshold for [`soft_threshold`]: one value for every entry or one per
/// entry.
#[derive(Debug, Clone, Copy)]
pub enum Theta<'a> {
    Uniform(f64),
    PerElement(&'a [f64]),
}

impl From<f64> for Theta<'_> {
    fn from(v: f64) -> Self {
        Theta::Uniform(v)
    }
}

impl<'a> From<&'a [f64]> for Theta<'a> {
    fn from(v: &'a [f64]) -> Self {
        Theta::PerElement(v)
    }
}

#[inline]
pub fn shrink(v: f64, theta: f64) -> f64 {
    let m = v.abs() - theta;
    if m > 0.0 {
        m.copysign(v)
    } else {
        0.0
    }
}

/// `sign(v)·max(0, |v| − θ)` elementwise.
pub fn soft_threshold<'a>(v: &[f64], theta: impl Into<Theta<'a>>) -> Result<Vec<f64>> {
    match theta.into() {
        Theta::Uniform(t) => {
            if !(t >= 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "threshold must be >= 0, got {t}"
                )));
            }
            Ok(v.iter().map(|&a| shrink(a, t)).collect())
        }
        Theta::PerElement(ts) => {
            if ts.len() != v.len() {
                return Err(Error::DimensionMismatch(format!(
                    "{} thresholds for {} values",
                    ts.len(),
                    v.len()
                )));
            }
            if let Some(t) = ts.iter().find(|t| !(**t >= 0.0)) {
                return Err(Error::InvalidParameter(format!(
                    "threshold must be >= 0, got {t}"
                )));
            }
            Ok(v.iter().zip(ts).map(|(&a, &t)| shrink(a, t)).collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    /// Scaled multiplier `μ/ρ`.
    pub beta: Vec<f64>,
}

impl AdmmState {
    pub fn zeros(n: usize) -> Self {
        AdmmState {
            x: vec![0.0; n],
            z: vec![0.0; n],
            beta: vec![0.0; n],
        }
    }
}

/// `x = (AᵀA + ρI)⁻¹ (Aᵀy + ρ(z − β))`.
pub fn admm_x_update(
    op: &dyn LinearOperator,
    solver: &dyn ShiftedSolve,
    state: &AdmmState,
    y: &[f64],
    rho: f64,
) -> Vec<f64> {
    let mut rhs = op.adjoint(y);
    for ((r, z), b) in rhs.iter_mut().zip(&state.z).zip(&state.beta) {
        *r += rho * (z - b);
    }
    solver.solve(&rhs)
}

/// Proximal z-step: `z = S(x + β, λ/ρ)`.
pub fn admm_z_update_prox(state: &AdmmState, cfg: &SolverConfig) -> Vec<f64> {
    let theta = cfg.lambda / cfg.rho;
    state
        .x
        .iter()
        .zip(&state.beta)
        .map(|(x, b)| shrink(x + b, theta))
        .collect()
}

/// One sparsifying filter `D_l` with its weight `λ_l`.
#[derive(Debug, Clone)]
pub struct SparsifyingFilter {
    /// Square, odd-sided kernel, row-major.
    pub kernel: Vec<f64>,
    pub side: usize,
    pub lambda: f64,
}

/// Zero-padded same-size cross-correlation (`transpose = false`) or its
/// adjoint (`transpose = true`).
fn correlate(
    src: &[f64],
    rows: usize,
    cols: usize,
    k: &[f64],
    side: usize,
    transpose: bool,
) -> Vec<f64> {
    let r = (side / 2) as i64;
    let mut out = vec![0.0; src.len()];
    for i in 0..rows as i64 {
        for j in 0..cols as i64 {
            let mut acc = 0.0;
            for di in -r..=r {
                for dj in -r..=r {
                    let (si, sj) = if transpose {
                        (i - di, j - dj)
                    } else {
                        (i + di, j + dj)
                    };
                    if si < 0 || sj < 0 || si >= rows as i64 || sj >= cols as i64 {
                        continue;
                    }
                    acc += k[((di + r) as usize) * side + (dj + r) as usize]
                        * src[si as usize * cols + sj as usize];
                }
            }
            out[i as usize * cols + j as usize] = acc;
        }
    }
    out
}

/// Gradient z-step:
/// `z ← μ1·z + μ2·(x + β) − Σ_l λ̃_l·D_lᵀ·act(D_l z)` with `μ1 = 1 − l_r·ρ`,
/// `μ2 = l_r·ρ`, `λ̃_l = l_r·λ_l`.
pub fn admm_z_update_gradient(
    state: &AdmmState,
    dims: (usize, usize),
    step: f64,
    rho: f64,
    filters: &[SparsifyingFilter],
    activation: impl Fn(f64) -> f64,
) -> Result<Vec<f64>> {
    let (rows, cols) = dims;
    if rows * cols != state.z.len() {
        return Err(Error::DimensionMismatch(format!(
            "{rows}x{cols} grid for {} values",
            state.z.len()
        )));
    }
    let mu2 = step * rho;
    let mu1 = 1.0 - mu2;
    let mut z: Vec<f64> = state
        .z
        .iter()
        .zip(state.x.iter().zip(&state.beta))
        .map(|(z, (x, b))| mu1 * z + mu2 * (x + b))
        .collect();
    for f in filters {
        if f.side % 2 == 0 || f.kernel.len() != f.side * f.side {
            return Err(Error::DimensionMismatch(format!(
                "filter needs an odd square kernel, got {} taps for side {}",
                f.kernel.len(),
                f.side
            )));
        }
        let dz: Vec<f64> = correlate(&state.z, rows, cols, &f.kernel, f.side, false)
            .into_iter()
            .map(&activation)
            .collect();
        let back = correlate(&dz, rows, cols, &f.kernel, f.side, true);
        let lt = step * f.lambda;
        z.iter_mut().zip(back).for_each(|(z, b)| *z -= lt * b);
    }
    Ok(z)
}

/// `β ← β + ρ(x − z)`.
pub fn admm_beta_update(state: &AdmmState, rho: f64) -> Vec<f64> {
    state
        .beta
        .iter()
        .zip(state.x.iter().zip(&state.z))
        .map(|(b, (x, z))| b + rho * (x - z))
        .collect()
}

/// `½‖Av − y‖² + λ‖v‖₁`.
pub fn objective(op: &dyn LinearOperator, y: &[f64], v: &[f64], lambda: f64) -> f64 {
    let r = op.apply(v);
    let fit: f64 = r.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    0.5 * fit + lambda * v.iter().map(|a| a.abs()).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    pub rel_change: f64,
    /// Objective at the sparse iterate (`z` for ADMM, `x` for ISTA).
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    /// Nonnegative estimate on the sub-pixel grid.
    pub estimate: Vec<f64>,
    pub iterations: usize,
    pub trace: Vec<IterationRecord>,
    /// Final ADMM state; `None` for ISTA.
    pub state: Option<AdmmState>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn rel_change(new: &[f64], old: &[f64]) -> f64 {
    let diff = new
        .iter()
        .zip(old)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let base = norm(old);
    if diff == 0.0 {
        0.0
    } else if base == 0.0 {
        f64::INFINITY
    } else {
        diff / base
    }
}

fn check_dims(op: &dyn LinearOperator, y: &[f64]) -> Result<()> {
    if y.len() != op.rows() {
        return Err(Error::DimensionMismatch(format!(
            "measurement has {} values, operator expects {}",
            y.len(),
            op.rows()
        )));
    }
    Ok(())
}

/// ADMM with the proximal z-step.
pub fn admm_solve(op: &dyn LinearOperator, y: &[f64], cfg: &SolverConfig) -> Result<SolveReport> {
    cfg.validate()?;
    check_dims(op, y)?;
    let solver = op.shifted_solver(cfg.rho)?;
    let mut state = AdmmState::zeros(op.cols());
    let mut trace = Vec::new();
    for iter in 1..=cfg.max_iters {
        let prev = state.x.clone();
        state.x = admm_x_update(op, solver.as_ref(), &state, y, cfg.rho);
        state.z = admm_z_update_prox(&state, cfg);
        state.beta = admm_beta_update(&state, cfg.rho);
        let n = norm(&state.x).max(norm(&state.beta));
        if !(n <= DIVERGENCE_NORM) {
            return Err(Error::Divergence {
                iteration: iter,
                norm: n,
            });
        }
        let change = rel_change(&state.x, &prev);
        trace.push(IterationRecord {
            iter,
            rel_change: change,
            objective: objective(op, y, &state.z, cfg.lambda),
        });
        if change < cfg.tol {
            break;
        }
    }
    Ok(SolveReport {
        estimate: state.x.iter().map(|v| v.max(0.0)).collect(),
        iterations: trace.len(),
        trace,
        state: Some(state),
    })
}

/// ISTA: `x ← S(x − l_r·Aᵀ(Ax − y), l_r·λ)`.
pub fn ista_solve(op: &dyn LinearOperator, y: &[f64], cfg: &SolverConfig) -> Result<SolveReport> {
    cfg.validate()?;
    check_dims(op, y)?;
    let step = match cfg.step {
        Some(s) => s,
        None => {
            let l = op.spectral_norm_sq();
            if l > 0.0 {
                0.99 / l
            } else {
                1.0
            }
        }
    };
    let theta = step * cfg.lambda;
    let mut x = vec![0.0; op.cols()];
    let mut trace = Vec::new();
    for iter in 1..=cfg.max_iters {
        let mut resid = op.apply(&x);
        resid.iter_mut().zip(y).for_each(|(r, b)| *r -= b);
        let grad = op.adjoint(&resid);
        let next: Vec<f64> = x
            .iter()
            .zip(&grad)
            .map(|(a, g)| shrink(a - step * g, theta))
            .collect();
        let n = norm(&next);
        if !(n <= DIVERGENCE_NORM) {
            return Err(Error::Divergence {
                iteration: iter,
                norm: n,
            });
        }
        let change = rel_change(&next, &x);
        x = next;
        trace.push(IterationRecord {
            iter,
            rel_change: change,
            objective: objective(op, y, &x, cfg.lambda),
        });
        if change < cfg.tol {
            break;
        }
    }
    Ok(SolveReport {
        estimate: x.iter().map(|v| v.max(0.0)).collect(),
        iterations: trace.len(),
        trace,
        state: None,
    })
}

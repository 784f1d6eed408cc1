//! Laplacian-regularized graph filtering.
//!
//! Minimizes `½‖H − X‖²_F + (β/2)·tr(HᵀLH)`, whose stationarity condition is
//! the SPD system `(I + βL)H = X`. Three solvers are provided: a dense
//! Cholesky solve (the reference), exact Gauss-Seidel sweeps on the
//! `(1+β)I − (Uᵀ + U)` splitting, and the first-order Neumann variant where
//! `((1+β)I − Uᵀ)⁻¹` is replaced by `(1−β)I + Uᵀ`.

use serde::{Deserialize, Serialize};

use crate::graph::{check_beta, MatrixSplit};
use crate::linalg::{ensure_finite, ensure_same_shape, forward_substitute};
use crate::{Error, Mat, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub beta: f64,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            beta: 0.2,
            tol: 1e-10,
            max_iters: 1000,
        }
    }
}

impl FilterConfig {
    pub fn new(beta: f64, tol: f64, max_iters: usize) -> Result<Self> {
        let cfg = FilterConfig { beta, tol, max_iters };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_beta(self.beta)?;
        if !(self.tol > 0.0) {
            return Err(Error::param(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iters == 0 {
            return Err(Error::param("max_iters must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolveMethod {
    /// Exact Gauss-Seidel sweeps.
    Exact,
    /// Iterated first-order Neumann step.
    Approx,
    /// Dense Cholesky.
    Direct,
}

/// Outcome of an iterative solve.
///
/// For [`SolveMethod::Exact`] and [`SolveMethod::Direct`] `final_residual` is
/// `‖(I+βL)H − X‖_F / ‖X‖_F`. The Neumann iteration converges to a different
/// fixed point, so for [`SolveMethod::Approx`] it is the relative size of the
/// last update `‖H⁽ᵏ⁺¹⁾ − H⁽ᵏ⁾‖_F / ‖X‖_F`. Norms fall back to absolute
/// values when `X = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub method: SolveMethod,
    #[serde(skip)]
    pub solution: Mat,
    pub iterations: usize,
    pub final_residual: f64,
    pub converged: bool,
    pub residual_history: Vec<f64>,
}

fn check_operands(h: &Mat, x: &Mat, l: &Mat) -> Result<()> {
    ensure_same_shape(h, x, "H and X")?;
    if !l.is_square() || l.nrows() != x.nrows() {
        return Err(Error::shape(format!(
            "Laplacian {:?} incompatible with features {:?}",
            l.shape(),
            x.shape()
        )));
    }
    Ok(())
}

/// `½‖H − X‖²_F + (β/2)·tr(HᵀLH)`.
pub fn objective(h: &Mat, x: &Mat, l: &Mat, beta: f64) -> Result<f64> {
    check_operands(h, x, l)?;
    let fidelity = 0.5 * (h - x).norm_squared();
    let smooth = (h.transpose() * l * h).trace();
    Ok(fidelity + 0.5 * beta * smooth)
}

/// `H − X + βLH`.
pub fn objective_gradient(h: &Mat, x: &Mat, l: &Mat, beta: f64) -> Result<Mat> {
    check_operands(h, x, l)?;
    Ok(h - x + (l * h) * beta)
}

/// Dense solve of `(I + βL)H = X` by Cholesky factorization.
pub fn direct_solve(x: &Mat, l: &Mat, beta: f64) -> Result<Mat> {
    check_operands(x, x, l)?;
    if !(beta >= 0.0) {
        return Err(Error::param(format!("beta must be non-negative, got {beta}")));
    }
    let n = x.nrows();
    let system = Mat::identity(n, n) + l * beta;
    let chol = nalgebra::Cholesky::new(system)
        .ok_or_else(|| Error::param("I + βL is not positive definite"))?;
    Ok(chol.solve(x))
}

fn relative(norm: f64, scale: f64) -> f64 {
    if scale > 0.0 {
        norm / scale
    } else {
        norm
    }
}

/// `‖(I+βL)H − X‖_F / ‖X‖_F` with the system matrix taken from `split`.
pub fn relative_residual(h: &Mat, x: &Mat, split: &MatrixSplit) -> f64 {
    let r = split.system_matrix() * h - x;
    relative(r.norm(), x.norm())
}

fn check_split(x: &Mat, split: &MatrixSplit, cfg: &FilterConfig) -> Result<()> {
    cfg.validate()?;
    if split.beta() != cfg.beta {
        return Err(Error::param(format!(
            "split built for beta {} but config has beta {}",
            split.beta(),
            cfg.beta
        )));
    }
    if x.nrows() != split.size() {
        return Err(Error::shape(format!(
            "features have {} rows, graph has {} nodes",
            x.nrows(),
            split.size()
        )));
    }
    ensure_finite(x, "feature matrix")
}

/// Exact Gauss-Seidel iteration
/// `H⁽ᵏ⁺¹⁾ = ((1+β)I − Uᵀ)⁻¹ (U H⁽ᵏ⁾ + X)` starting from `H⁽⁰⁾ = X`, where
/// the inverse is applied by forward substitution. Running out of iterations
/// is reported through `converged = false`.
pub fn gauss_seidel_solve(x: &Mat, split: &MatrixSplit, cfg: &FilterConfig) -> Result<SolveReport> {
    check_split(x, split, cfg)?;
    let lower = split.lower();
    let system = split.system_matrix();
    let scale = x.norm();
    let mut h = x.clone();
    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..cfg.max_iters {
        let rhs = split.upper() * &h + x;
        h = forward_substitute(split.lambda_beta(), &lower, &rhs);
        let res = relative((&system * &h - x).norm(), scale);
        history.push(res);
        if res <= cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(SolveReport {
        method: SolveMethod::Exact,
        iterations: history.len(),
        final_residual: *history.last().expect("max_iters >= 1"),
        converged,
        residual_history: history,
        solution: h,
    })
}

/// `(1−β)I + Uᵀ`, the first-order Neumann approximation of
/// `((1+β)I − Uᵀ)⁻¹`.
pub fn neumann_first_order(split: &MatrixSplit) -> Mat {
    let n = split.size();
    Mat::identity(n, n) * (1.0 - split.beta()) + split.lower()
}

/// One step of the approximate iteration:
/// `((1−β)I + Uᵀ)·U·H + ((1−β)I + Uᵀ)·X`.
pub fn approx_gauss_seidel_step(h: &Mat, x: &Mat, split: &MatrixSplit) -> Result<Mat> {
    ensure_same_shape(h, x, "H and X")?;
    if x.nrows() != split.size() {
        return Err(Error::shape(format!(
            "features have {} rows, graph has {} nodes",
            x.nrows(),
            split.size()
        )));
    }
    let p = neumann_first_order(split);
    Ok(&p * (split.upper() * h + x))
}

/// Iterates [`approx_gauss_seidel_step`] from `H⁽⁰⁾ = X` until the relative
/// update drops below `tol`.
pub fn approx_solve(x: &Mat, split: &MatrixSplit, cfg: &FilterConfig) -> Result<SolveReport> {
    check_split(x, split, cfg)?;
    let p = neumann_first_order(split);
    let pu = &p * split.upper();
    let px = &p * x;
    let scale = x.norm();
    let mut h = x.clone();
    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..cfg.max_iters {
        let next = &pu * &h + &px;
        let change = relative((&next - &h).norm(), scale);
        h = next;
        history.push(change);
        if !change.is_finite() {
            break;
        }
        if change <= cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(SolveReport {
        method: SolveMethod::Approx,
        iterations: history.len(),
        final_residual: *history.last().expect("max_iters >= 1"),
        converged,
        residual_history: history,
        solution: h,
    })
}

/// Dispatch on `method`. The direct solver reports a single "iteration".
pub fn solve(x: &Mat, split: &MatrixSplit, cfg: &FilterConfig, method: SolveMethod) -> Result<SolveReport> {
    match method {
        SolveMethod::Exact => gauss_seidel_solve(x, split, cfg),
        SolveMethod::Approx => approx_solve(x, split, cfg),
        SolveMethod::Direct => {
            check_split(x, split, cfg)?;
            let n = split.size();
            // I + βL = (1+β)I − βÂ, so βL = system − I
            let beta_l = split.system_matrix() - Mat::identity(n, n);
            let h = if cfg.beta > 0.0 {
                direct_solve(x, &(beta_l / cfg.beta), cfg.beta)?
            } else {
                x.clone()
            };
            let res = relative_residual(&h, x, split);
            Ok(SolveReport {
                method,
                iterations: 1,
                final_residual: res,
                converged: res <= cfg.tol,
                residual_history: vec![res],
                solution: h,
            })
        }
    }
}

//! The GS-Net propagation rule.
//!
//! With `Ǎ` the (modulated) normalized adjacency, `U` the strictly upper
//! triangular part of `βǍ` and `P = (1−β)I + Uᵀ`, a layer computes
//!
//! ```text
//! Z = P·U·(M ⊙ (H W)) + P·(M ⊙ (X W̃))
//! ```
//!
//! followed by an optional activation. `X` is the raw network input, so the
//! second summand re-injects the initial features at every depth.

use serde::{Deserialize, Serialize};

use crate::graph::{check_beta, NormalizedAdjacency};
use crate::linalg::{ensure_finite, strict_lower, strict_upper, row_major};
use crate::net::ops::gelu;
use crate::{Error, Mat, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    /// `F_in × F_out`
    #[serde(with = "row_major")]
    pub weight: Mat,
    /// `F_x × F_out`, applied to the initial features.
    #[serde(with = "row_major")]
    pub skip_weight: Mat,
    /// `N × F_out` per-node weight modulation.
    #[serde(with = "row_major")]
    pub modulation: Mat,
    pub beta: f64,
}

impl LayerParams {
    pub fn zeros_like(&self) -> Self {
        LayerParams {
            weight: Mat::zeros(self.weight.nrows(), self.weight.ncols()),
            skip_weight: Mat::zeros(self.skip_weight.nrows(), self.skip_weight.ncols()),
            modulation: Mat::zeros(self.modulation.nrows(), self.modulation.ncols()),
            beta: self.beta,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn validate(&self, num_joints: usize, input_dim: usize) -> Result<()> {
        check_beta(self.beta)?;
        let f_out = self.out_dim();
        if self.skip_weight.shape() != (input_dim, f_out) {
            return Err(Error::shape(format!(
                "skip weight {:?}, expected {:?}",
                self.skip_weight.shape(),
                (input_dim, f_out)
            )));
        }
        if self.modulation.shape() != (num_joints, f_out) {
            return Err(Error::shape(format!(
                "modulation {:?}, expected {:?}",
                self.modulation.shape(),
                (num_joints, f_out)
            )));
        }
        ensure_finite(&self.weight, "layer weight")?;
        ensure_finite(&self.skip_weight, "layer skip weight")?;
        ensure_finite(&self.modulation, "layer modulation")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerOptions {
    /// Include the initial-feature term.
    pub skip: bool,
    /// Use `(Q + Qᵀ)/2` rather than `Q` as the adjacency perturbation.
    pub symmetrize: bool,
}

impl Default for LayerOptions {
    fn default() -> Self {
        LayerOptions {
            skip: true,
            symmetrize: true,
        }
    }
}

/// `Ǎ = Â + (Q + Qᵀ)/2` with the diagonal of the perturbation zeroed, so the
/// result is symmetric with zero diagonal.
pub fn modulated_adjacency(na: &NormalizedAdjacency, q: &Mat) -> Result<Mat> {
    modulate(na.entries(), Some(q), true)
}

fn modulate(a_hat: &Mat, q: Option<&Mat>, symmetrize: bool) -> Result<Mat> {
    let n = a_hat.nrows();
    let Some(q) = q else {
        return Ok(a_hat.clone());
    };
    if q.shape() != (n, n) {
        return Err(Error::shape(format!("Q is {:?}, adjacency is {n}x{n}", q.shape())));
    }
    Ok(Mat::from_fn(n, n, |i, j| {
        if i == j {
            a_hat[(i, j)]
        } else if symmetrize {
            a_hat[(i, j)] + (q[(i, j)] + q[(j, i)]) / 2.0
        } else {
            a_hat[(i, j)] + q[(i, j)]
        }
    }))
}

/// The triangular factors a layer propagates with.
///
/// `upper` is the strictly upper part of `βǍ` and `lower = upperᵀ`. Without
/// symmetrization the strictly lower part of `Q` therefore has no effect.
#[derive(Debug, Clone)]
pub struct Propagator {
    upper: Mat,
    lower: Mat,
    precond: Mat,
    beta: f64,
    symmetrize: bool,
}

impl Propagator {
    pub fn new(a_hat: &Mat, q: Option<&Mat>, beta: f64, symmetrize: bool) -> Result<Self> {
        check_beta(beta)?;
        let scaled = modulate(a_hat, q, symmetrize)? * beta;
        let upper = strict_upper(&scaled);
        let lower = upper.transpose();
        let n = scaled.nrows();
        let precond = Mat::identity(n, n) * (1.0 - beta) + &lower;
        Ok(Propagator {
            upper,
            lower,
            precond,
            beta,
            symmetrize,
        })
    }

    pub fn upper(&self) -> &Mat {
        &self.upper
    }

    pub fn lower(&self) -> &Mat {
        &self.lower
    }

    /// `(1−β)I + lower`.
    pub fn precond(&self) -> &Mat {
        &self.precond
    }

    pub fn size(&self) -> usize {
        self.upper.nrows()
    }

    /// Map an accumulated gradient with respect to `upper` (above the
    /// diagonal) and `lower` (below it) back to `Q`.
    pub fn grad_q(&self, d_scaled: &Mat) -> Mat {
        let n = self.size();
        let d_mod = d_scaled * self.beta;
        Mat::from_fn(n, n, |i, j| {
            let both = d_mod[(i, j)] + d_mod[(j, i)];
            if i == j {
                0.0
            } else if self.symmetrize {
                both / 2.0
            } else if i < j {
                both
            } else {
                0.0
            }
        })
    }
}

/// Intermediate values of one sample through one layer.
#[derive(Debug, Clone)]
pub struct LayerTape {
    h: Mat,
    hw: Mat,
    xw: Option<Mat>,
    a1: Mat,
    s: Mat,
}

/// Pre-activation output `Z` of one layer for one sample.
pub fn layer_pre_activation(
    h: &Mat,
    x0: &Mat,
    params: &LayerParams,
    prop: &Propagator,
    skip: bool,
) -> (Mat, LayerTape) {
    let hw = h * &params.weight;
    let a1 = hw.component_mul(&params.modulation);
    let mut s = prop.upper() * &a1;
    let xw = if skip {
        let xw = x0 * &params.skip_weight;
        s += xw.component_mul(&params.modulation);
        Some(xw)
    } else {
        None
    };
    let z = prop.precond() * &s;
    (
        z,
        LayerTape {
            h: h.clone(),
            hw,
            xw,
            a1,
            s,
        },
    )
}

/// Backward of [`layer_pre_activation`]. Parameter gradients are added to
/// `grads`; the gradient with respect to the off-diagonal part of `βǍ` is
/// added to `d_scaled`. Returns the gradient with respect to `h`.
pub fn layer_backward(
    dz: &Mat,
    tape: &LayerTape,
    x0: &Mat,
    params: &LayerParams,
    prop: &Propagator,
    grads: &mut LayerParams,
    d_scaled: &mut Mat,
) -> Mat {
    let ds = prop.precond().transpose() * dz;
    *d_scaled += strict_lower(&(dz * tape.s.transpose()));
    *d_scaled += strict_upper(&(&ds * tape.a1.transpose()));
    let da1 = prop.upper().transpose() * &ds;

    grads.modulation += da1.component_mul(&tape.hw);
    let dhw = da1.component_mul(&params.modulation);
    grads.weight += tape.h.transpose() * &dhw;

    if let Some(xw) = &tape.xw {
        grads.modulation += ds.component_mul(xw);
        grads.skip_weight += x0.transpose() * ds.component_mul(&params.modulation);
    }
    dhw * params.weight.transpose()
}

/// One GS-Net layer on a single `N×F_in` feature matrix, with optional GELU.
/// Passing `q = None` propagates with the unmodulated `Â`.
pub fn gsnet_layer_forward(
    h: &Mat,
    x0: &Mat,
    params: &LayerParams,
    na: &NormalizedAdjacency,
    q: Option<&Mat>,
    opts: LayerOptions,
    activation: bool,
) -> Result<Mat> {
    let n = na.size();
    params.validate(n, x0.ncols())?;
    if h.nrows() != n || x0.nrows() != n || h.ncols() != params.in_dim() {
        return Err(Error::shape(format!(
            "layer expects H {n}x{} and X {n}x{}, got {:?} and {:?}",
            params.in_dim(),
            params.skip_weight.nrows(),
            h.shape(),
            x0.shape()
        )));
    }
    if let Some(q) = q {
        ensure_finite(q, "adjacency modulation")?;
    }
    let prop = Propagator::new(na.entries(), q, params.beta, opts.symmetrize)?;
    let (mut z, _) = layer_pre_activation(h, x0, params, &prop, opts.skip);
    if activation {
        z.apply(|v| *v = gelu(*v));
    }
    Ok(z)
}

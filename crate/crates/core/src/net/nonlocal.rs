//! Embedded-Gaussian non-local block over the joints of one sample:
//! `y = h + softmax(θ(h)·φ(h)ᵀ)·g(h)·W_out`.

use serde::{Deserialize, Serialize};

use crate::linalg::row_major;
use crate::net::ops::{softmax_rows, softmax_rows_backward};
use crate::{Error, Mat, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonLocalParams {
    /// `C × C_i`
    #[serde(with = "row_major")]
    pub theta: Mat,
    #[serde(with = "row_major")]
    pub phi: Mat,
    #[serde(with = "row_major")]
    pub g: Mat,
    /// `C_i × C`; zero-initialized so the block starts as the identity.
    #[serde(with = "row_major")]
    pub out: Mat,
}

impl NonLocalParams {
    pub fn zeros(channels: usize, inner: usize) -> Self {
        NonLocalParams {
            theta: Mat::zeros(channels, inner),
            phi: Mat::zeros(channels, inner),
            g: Mat::zeros(channels, inner),
            out: Mat::zeros(inner, channels),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.theta.nrows(), self.theta.ncols())
    }

    pub fn channels(&self) -> usize {
        self.theta.nrows()
    }
}

#[derive(Debug, Clone)]
pub struct NonLocalTape {
    h: Mat,
    theta: Mat,
    phi: Mat,
    g: Mat,
    attn: Mat,
    y: Mat,
}

impl NonLocalTape {
    pub fn attention(&self) -> &Mat {
        &self.attn
    }
}

pub fn nonlocal_forward_tape(h: &Mat, p: &NonLocalParams) -> (Mat, NonLocalTape) {
    let theta = h * &p.theta;
    let phi = h * &p.phi;
    let g = h * &p.g;
    let attn = softmax_rows(&(&theta * phi.transpose()));
    let y = &attn * &g;
    let out = h + &y * &p.out;
    (
        out,
        NonLocalTape {
            h: h.clone(),
            theta,
            phi,
            g,
            attn,
            y,
        },
    )
}

pub fn nonlocal_forward(h: &Mat, p: &NonLocalParams) -> Result<Mat> {
    if h.ncols() != p.channels() {
        return Err(Error::shape(format!(
            "non-local block has {} channels, input has {}",
            p.channels(),
            h.ncols()
        )));
    }
    Ok(nonlocal_forward_tape(h, p).0)
}

pub fn nonlocal_backward(dout: &Mat, tape: &NonLocalTape, p: &NonLocalParams, grads: &mut NonLocalParams) -> Mat {
    grads.out += tape.y.transpose() * dout;
    let dy = dout * p.out.transpose();
    let dattn = &dy * tape.g.transpose();
    let dg = tape.attn.transpose() * &dy;
    let ds = softmax_rows_backward(&tape.attn, &dattn);
    let dtheta = &ds * &tape.phi;
    let dphi = ds.transpose() * &tape.theta;
    grads.theta += tape.h.transpose() * &dtheta;
    grads.phi += tape.h.transpose() * &dphi;
    grads.g += tape.h.transpose() * &dg;
    dout + dtheta * p.theta.transpose() + dphi * p.phi.transpose() + dg * p.g.transpose()
}

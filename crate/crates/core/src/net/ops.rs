//! Elementwise and normalization primitives with their backward rules.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::Mat;

pub const NORM_EPS: f64 = 1e-5;

/// Exact GELU `x·Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

/// `d/dx x·Φ(x) = Φ(x) + x·φ(x)`.
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Layer normalization of a single feature row followed by the affine map.
pub fn layer_norm(row: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let f = row.len() as f64;
    let mean = row.iter().sum::<f64>() / f;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / f;
    let inv_std = 1.0 / (var + NORM_EPS).sqrt();
    row.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| (v - mean) * inv_std * g + b)
        .collect()
}

#[derive(Debug, Clone)]
pub struct LayerNormTape {
    xhat: Mat,
    inv_std: Vec<f64>,
}

/// Row-wise layer norm of a `N×F` matrix. `gain` and `bias` are `1×F`.
pub fn layer_norm_forward(x: &Mat, gain: &Mat, bias: &Mat) -> (Mat, LayerNormTape) {
    let (n, f) = x.shape();
    let mut xhat = Mat::zeros(n, f);
    let mut inv_std = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.mean();
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / f as f64;
        let s = 1.0 / (var + NORM_EPS).sqrt();
        inv_std.push(s);
        for j in 0..f {
            xhat[(i, j)] = (x[(i, j)] - mean) * s;
        }
    }
    let y = Mat::from_fn(n, f, |i, j| xhat[(i, j)] * gain[(0, j)] + bias[(0, j)]);
    (y, LayerNormTape { xhat, inv_std })
}

pub fn layer_norm_backward(
    dy: &Mat,
    tape: &LayerNormTape,
    gain: &Mat,
    d_gain: &mut Mat,
    d_bias: &mut Mat,
) -> Mat {
    let (n, f) = dy.shape();
    let mut dx = Mat::zeros(n, f);
    for i in 0..n {
        let mut sum_d = 0.0;
        let mut sum_dx = 0.0;
        for j in 0..f {
            let g = dy[(i, j)];
            d_gain[(0, j)] += g * tape.xhat[(i, j)];
            d_bias[(0, j)] += g;
            let dxhat = g * gain[(0, j)];
            sum_d += dxhat;
            sum_dx += dxhat * tape.xhat[(i, j)];
        }
        let scale = tape.inv_std[i] / f as f64;
        for j in 0..f {
            let dxhat = dy[(i, j)] * gain[(0, j)];
            dx[(i, j)] = scale * (f as f64 * dxhat - sum_d - tape.xhat[(i, j)] * sum_dx);
        }
    }
    dx
}

/// Per-channel batch statistics over every sample and node.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct BatchNormTape {
    xhat: Vec<Mat>,
    inv_std: Vec<f64>,
    /// Running statistics were used, so there is no coupling across samples.
    frozen: bool,
}

pub fn batch_stats(xs: &[Mat]) -> BatchStats {
    let c = xs[0].ncols();
    let count: usize = xs.iter().map(|x| x.nrows()).sum();
    let mut mean = vec![0.0; c];
    for x in xs {
        for (j, col) in x.column_iter().enumerate() {
            mean[j] += col.sum();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut var = vec![0.0; c];
    for x in xs {
        for (j, col) in x.column_iter().enumerate() {
            var[j] += col.iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count as f64);
    BatchStats { mean, var, count }
}

/// Batch normalization with either the given batch statistics (training) or
/// frozen running statistics (evaluation).
pub fn batch_norm_forward(
    xs: &[Mat],
    stats: &BatchStats,
    frozen: bool,
    gain: &Mat,
    bias: &Mat,
) -> (Vec<Mat>, BatchNormTape) {
    let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
    let xhat: Vec<Mat> = xs
        .iter()
        .map(|x| Mat::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - stats.mean[j]) * inv_std[j]))
        .collect();
    let ys = xhat
        .iter()
        .map(|xh| Mat::from_fn(xh.nrows(), xh.ncols(), |i, j| xh[(i, j)] * gain[(0, j)] + bias[(0, j)]))
        .collect();
    (ys, BatchNormTape { xhat, inv_std, frozen })
}

pub fn batch_norm_backward(
    dys: &[Mat],
    tape: &BatchNormTape,
    gain: &Mat,
    d_gain: &mut Mat,
    d_bias: &mut Mat,
) -> Vec<Mat> {
    let c = gain.ncols();
    let count: usize = dys.iter().map(|d| d.nrows()).sum();
    let mut sum_d = vec![0.0; c];
    let mut sum_dx = vec![0.0; c];
    for (dy, xh) in dys.iter().zip(&tape.xhat) {
        for i in 0..dy.nrows() {
            for j in 0..c {
                let g = dy[(i, j)];
                d_gain[(0, j)] += g * xh[(i, j)];
                d_bias[(0, j)] += g;
                let dxhat = g * gain[(0, j)];
                sum_d[j] += dxhat;
                sum_dx[j] += dxhat * xh[(i, j)];
            }
        }
    }
    let m = count as f64;
    dys.iter()
        .zip(&tape.xhat)
        .map(|(dy, xh)| {
            Mat::from_fn(dy.nrows(), c, |i, j| {
                let dxhat = dy[(i, j)] * gain[(0, j)];
                if tape.frozen {
                    dxhat * tape.inv_std[j]
                } else {
                    tape.inv_std[j] / m * (m * dxhat - sum_d[j] - xh[(i, j)] * sum_dx[j])
                }
            })
        })
        .collect()
}

/// Row-wise softmax.
pub fn softmax_rows(s: &Mat) -> Mat {
    let mut out = s.clone();
    for mut row in out.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let total = row.sum();
        row /= total;
    }
    out
}

/// Backward of [`softmax_rows`] given its output `a`.
pub fn softmax_rows_backward(a: &Mat, da: &Mat) -> Mat {
    let mut ds = Mat::zeros(a.nrows(), a.ncols());
    for i in 0..a.nrows() {
        let dot: f64 = (0..a.ncols()).map(|j| a[(i, j)] * da[(i, j)]).sum();
        for j in 0..a.ncols() {
            ds[(i, j)] = a[(i, j)] * (da[(i, j)] - dot);
        }
    }
    ds
}

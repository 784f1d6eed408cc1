//! Pose refinement head: two fully connected layers over the flattened pose,
//! added back as a residual correction.

use serde::{Deserialize, Serialize};

use crate::linalg::row_major;
use crate::net::ops::{gelu, gelu_grad};
use crate::{Error, Mat, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineParams {
    /// `3N × hidden`
    #[serde(with = "row_major")]
    pub w1: Mat,
    #[serde(with = "row_major")]
    pub b1: Mat,
    /// `hidden × 3N`, zero-initialized.
    #[serde(with = "row_major")]
    pub w2: Mat,
    #[serde(with = "row_major")]
    pub b2: Mat,
}

impl RefineParams {
    pub fn zeros(pose_dim: usize, hidden: usize) -> Self {
        RefineParams {
            w1: Mat::zeros(pose_dim, hidden),
            b1: Mat::zeros(1, hidden),
            w2: Mat::zeros(hidden, pose_dim),
            b2: Mat::zeros(1, pose_dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.w1.nrows(), self.w1.ncols())
    }

    pub fn pose_dim(&self) -> usize {
        self.w1.nrows()
    }
}

#[derive(Debug, Clone)]
pub struct RefineTape {
    flat: Mat,
    pre: Mat,
    act: Mat,
}

fn flatten(pose: &Mat) -> Mat {
    // row-major: joint j, coordinate c -> 3j + c
    Mat::from_row_slice(1, pose.len(), pose.transpose().as_slice())
}

fn unflatten(flat: &Mat, n: usize, d: usize) -> Mat {
    Mat::from_row_slice(n, d, flat.as_slice())
}

/// Refines a single `N×3` pose.
pub fn refine_forward_tape(pose: &Mat, p: &RefineParams) -> (Mat, RefineTape) {
    let flat = flatten(pose);
    let pre = &flat * &p.w1 + &p.b1;
    let act = pre.map(gelu);
    let corr = &act * &p.w2 + &p.b2;
    let out = pose + unflatten(&corr, pose.nrows(), pose.ncols());
    (out, RefineTape { flat, pre, act })
}

pub fn refine_backward(dout: &Mat, tape: &RefineTape, p: &RefineParams, grads: &mut RefineParams) -> Mat {
    let dcorr = flatten(dout);
    grads.w2 += tape.act.transpose() * &dcorr;
    grads.b2 += &dcorr;
    let dact = &dcorr * p.w2.transpose();
    let dpre = dact.component_mul(&tape.pre.map(gelu_grad));
    grads.w1 += tape.flat.transpose() * &dpre;
    grads.b1 += &dpre;
    let dflat = dpre * p.w1.transpose();
    dout + unflatten(&dflat, dout.nrows(), dout.ncols())
}

/// Refines every pose of a batch.
pub fn refine_pose(pred: &[Mat], p: &RefineParams) -> Result<Vec<Mat>> {
    pred.iter()
        .map(|pose| {
            if pose.len() != p.pose_dim() {
                return Err(Error::shape(format!(
                    "refinement expects {} coordinates per pose, got {:?}",
                    p.pose_dim(),
                    pose.shape()
                )));
            }
            Ok(refine_forward_tape(pose, p).0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_params(pose_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> RefineParams {
        RefineParams {
            w1: rand_mat(pose_dim, hidden, rng),
            b1: rand_mat(1, hidden, rng),
            w2: rand_mat(hidden, pose_dim, rng),
            b2: rand_mat(1, pose_dim, rng),
        }
    }

    #[test]
    fn zero_second_layer_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = random_params(12, 8, &mut rng);
        p.w2.fill(0.0);
        p.b2.fill(0.0);
        let pred = vec![rand_mat(4, 3, &mut rng), rand_mat(4, 3, &mut rng)];
        let out = refine_pose(&pred, &p).unwrap();
        assert_eq!(out, pred);
    }

    #[test]
    fn shape_preserved_and_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_params(12, 8, &mut rng);
        let out = refine_pose(&[rand_mat(4, 3, &mut rng)], &p).unwrap();
        assert_eq!(out[0].shape(), (4, 3));
        assert!(refine_pose(&[rand_mat(5, 3, &mut rng)], &p).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_params(9, 5, &mut rng);
        let pose = rand_mat(3, 3, &mut rng);
        let weights = rand_mat(3, 3, &mut rng);
        // scalar objective: <weights, refine(pose)>
        let f = |pose: &Mat, p: &RefineParams| refine_forward_tape(pose, p).0.component_mul(&weights).sum();
        let (_, tape) = refine_forward_tape(&pose, &p);
        let mut grads = p.zeros_like();
        let dpose = refine_backward(&weights, &tape, &p, &mut grads);

        let h = 1e-5;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        for i in 0..3 {
            for j in 0..3 {
                let mut pp = pose.clone();
                pp[(i, j)] += h;
                let mut pm = pose.clone();
                pm[(i, j)] -= h;
                let fd = (f(&pp, &p) - f(&pm, &p)) / (2.0 * h);
                assert!(rel(dpose[(i, j)], fd) < 1e-4);
            }
        }
        for (k, (r, c)) in [(0usize, (2usize, 3usize)), (1, (0, 4)), (2, (4, 7)), (3, (0, 8))] {
            let mut pp = p.clone();
            let mut pm = p.clone();
            let (gp, gm, an) = match k {
                0 => (&mut pp.w1, &mut pm.w1, grads.w1[(r, c)]),
                1 => (&mut pp.b1, &mut pm.b1, grads.b1[(r, c)]),
                2 => (&mut pp.w2, &mut pm.w2, grads.w2[(r, c)]),
                _ => (&mut pp.b2, &mut pm.b2, grads.b2[(r, c)]),
            };
            gp[(r, c)] += h;
            gm[(r, c)] -= h;
            let fd = (f(&pose, &pp) - f(&pose, &pm)) / (2.0 * h);
            assert!(rel(an, fd) < 1e-4, "param {k}: {an} vs {fd}");
        }
    }
}

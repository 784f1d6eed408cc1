//! Elastic-net pose loss:
//! `(1/B)·[(1−α)·Σ_i ‖y_i − ŷ_i‖²₂ + α·Σ_i ‖y_i − ŷ_i‖₁]`, norms taken over all
//! joint coordinates of each pose.

use crate::{Error, Mat, Result};

fn check(pred: &[Mat], target: &[Mat], alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::param(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::shape(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    for (i, (p, t)) in pred.iter().zip(target).enumerate() {
        if p.shape() != t.shape() {
            return Err(Error::shape(format!("sample {i}: {:?} vs {:?}", p.shape(), t.shape())));
        }
    }
    Ok(())
}

pub fn pose_loss(pred: &[Mat], target: &[Mat], alpha: f64) -> Result<f64> {
    check(pred, target, alpha)?;
    let mut sq = 0.0;
    let mut abs = 0.0;
    for (p, t) in pred.iter().zip(target) {
        let d = p - t;
        sq += d.norm_squared();
        abs += d.iter().map(|v| v.abs()).sum::<f64>();
    }
    Ok(((1.0 - alpha) * sq + alpha * abs) / pred.len() as f64)
}

/// Loss together with its gradient with respect to every prediction. The
/// subgradient of `|·|` at zero is taken as zero.
pub fn pose_loss_grad(pred: &[Mat], target: &[Mat], alpha: f64) -> Result<(f64, Vec<Mat>)> {
    let loss = pose_loss(pred, target, alpha)?;
    let b = pred.len() as f64;
    let grads = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            (p - t).map(|d| {
                let sign = if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                ((1.0 - alpha) * 2.0 * d + alpha * sign) / b
            })
        })
        .collect();
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(seed: u64) -> Vec<Mat> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..4).map(|_| Mat::from_fn(5, 3, |_, _| rng.random_range(-2.0..2.0))).collect()
    }

    #[test]
    fn hand_case() {
        let y = vec![Mat::zeros(1, 3)];
        let yhat = vec![Mat::from_row_slice(1, 3, &[1.0, 0.0, 0.0])];
        assert_eq!(pose_loss(&yhat, &y, 0.01).unwrap(), 1.0);
    }

    #[test]
    fn limits_are_mse_and_mae() {
        let (p, t) = (batch(1), batch(2));
        let mse: f64 = p.iter().zip(&t).map(|(a, b)| (a - b).norm_squared()).sum::<f64>() / 4.0;
        let mae: f64 = p
            .iter()
            .zip(&t)
            .map(|(a, b)| (a - b).iter().map(|v| v.abs()).sum::<f64>())
            .sum::<f64>()
            / 4.0;
        assert!((pose_loss(&p, &t, 0.0).unwrap() - mse).abs() < 1e-12);
        assert!((pose_loss(&p, &t, 1.0).unwrap() - mae).abs() < 1e-12);
    }

    #[test]
    fn linear_in_alpha() {
        let (p, t) = (batch(3), batch(4));
        let l0 = pose_loss(&p, &t, 0.0).unwrap();
        let l1 = pose_loss(&p, &t, 1.0).unwrap();
        for a in [0.01, 0.3, 0.77] {
            assert!((pose_loss(&p, &t, a).unwrap() - ((1.0 - a) * l0 + a * l1)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_iff_equal() {
        let p = batch(5);
        assert_eq!(pose_loss(&p, &p, 0.3).unwrap(), 0.0);
        let mut q = p.clone();
        q[2][(1, 1)] += 1e-3;
        assert!(pose_loss(&q, &p, 0.3).unwrap() > 0.0);
        let (_, g) = pose_loss_grad(&p, &p, 0.0).unwrap();
        assert!(g.iter().all(|m| m.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn errors() {
        let p = batch(6);
        assert!(pose_loss(&p, &p, 1.5).is_err());
        assert!(pose_loss(&p[..2], &p, 0.1).is_err());
    }
}

//! 3D pose error metrics. Poses are `N×3` matrices in millimetres, one row per
//! joint; a batch is a slice of poses.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, RowVector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Mat, Result};

/// Default PCK threshold.
pub const PCK_THRESHOLD_MM: f64 = 150.0;

/// AUC thresholds: 0, 5, ..., 150 mm.
pub fn auc_thresholds() -> Vec<f64> {
    (0..=30).map(|k| 5.0 * k as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionMetrics {
    pub count: usize,
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "mpjpe")]
    pub mpjpe_mm: f64,
    #[serde(rename = "pa_mpjpe")]
    pub pa_mpjpe_mm: f64,
    #[serde(rename = "pck")]
    pub pck_percent: f64,
    #[serde(rename = "auc")]
    pub auc_percent: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_action: Option<BTreeMap<String, ActionMetrics>>,
}

fn check_batch(pred: &[Mat], target: &[Mat]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::shape("empty batch"));
    }
    for (i, (p, t)) in pred.iter().zip(target).enumerate() {
        if p.shape() != t.shape() || p.ncols() != 3 {
            return Err(Error::shape(format!(
                "sample {i}: prediction {:?} vs target {:?}",
                p.shape(),
                t.shape()
            )));
        }
    }
    Ok(())
}

/// Euclidean error of every joint of every sample, flattened sample-major.
pub fn joint_errors(pred: &[Mat], target: &[Mat]) -> Result<Vec<f64>> {
    check_batch(pred, target)?;
    Ok(pred
        .iter()
        .zip(target)
        .flat_map(|(p, t)| (0..p.nrows()).map(move |j| (p.row(j) - t.row(j)).norm()))
        .collect())
}

fn sample_mpjpe(p: &Mat, t: &Mat) -> f64 {
    (0..p.nrows()).map(|j| (p.row(j) - t.row(j)).norm()).sum::<f64>() / p.nrows() as f64
}

/// Mean per-joint position error over all samples and joints.
pub fn mpjpe(pred: &[Mat], target: &[Mat]) -> Result<f64> {
    let errs = joint_errors(pred, target)?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Similarity transform mapping a prediction onto a target:
/// `aligned = scale · pred · rotation + translation`.
#[derive(Debug, Clone, PartialEq)]
pub struct Procrustes {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: RowVector3<f64>,
    pub aligned: Mat,
}

impl Procrustes {
    pub fn apply(&self, pose: &Mat) -> Mat {
        let mut out = pose * self.rotation * self.scale;
        for mut r in out.row_iter_mut() {
            r += self.translation;
        }
        Mat::from_fn(out.nrows(), 3, |i, j| out[(i, j)])
    }
}

fn centroid(m: &Mat) -> RowVector3<f64> {
    let mut c = RowVector3::zeros();
    for r in m.row_iter() {
        c += RowVector3::new(r[0], r[1], r[2]);
    }
    c / m.nrows() as f64
}

fn centered(m: &Mat, c: &RowVector3<f64>) -> Mat {
    let mut out = m.clone();
    for mut r in out.row_iter_mut() {
        r -= c;
    }
    out
}

/// Least-squares similarity alignment via SVD of the cross-covariance, with the
/// sign of the last singular direction flipped when needed so the rotation is
/// proper.
pub fn procrustes_align(pred: &Mat, target: &Mat) -> Result<Procrustes> {
    if pred.shape() != target.shape() || pred.ncols() != 3 {
        return Err(Error::shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.nrows() < 3 {
        return Err(Error::Degenerate(format!("{} points, need at least 3", pred.nrows())));
    }
    let mu_p = centroid(pred);
    let mu_t = centroid(target);
    let p0 = centered(pred, &mu_p);
    let t0 = centered(target, &mu_t);
    let p_norm2 = p0.norm_squared();
    if p_norm2 <= f64::EPSILON * pred.norm_squared().max(1.0) {
        return Err(Error::Degenerate("prediction joints are coincident".into()));
    }
    let cov: Matrix3<f64> = (p0.transpose() * &t0).fixed_view::<3, 3>(0, 0).into_owned();
    let svd = cov.svd(true, true);
    let mut u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let mut sigma = svd.singular_values;
    if (u * v_t).determinant() < 0.0 {
        let mut col = u.column_mut(2);
        col *= -1.0;
        sigma[2] = -sigma[2];
    }
    let rotation = u * v_t;
    let scale = sigma.sum() / p_norm2;
    let translation = mu_t - mu_p * rotation * scale;
    let mut t = Procrustes {
        scale,
        rotation,
        translation,
        aligned: Mat::zeros(0, 0),
    };
    t.aligned = t.apply(pred);
    Ok(t)
}

/// MPJPE after per-sample Procrustes alignment.
pub fn pa_mpjpe(pred: &[Mat], target: &[Mat]) -> Result<f64> {
    check_batch(pred, target)?;
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(target) {
        total += sample_mpjpe(&procrustes_align(p, t)?.aligned, t);
    }
    Ok(total / pred.len() as f64)
}

/// Percentage of joint errors strictly below `threshold_mm`.
pub fn pck_from_errors(errors: &[f64], threshold_mm: f64) -> f64 {
    let hits = errors.iter().filter(|&&e| e < threshold_mm).count();
    100.0 * hits as f64 / errors.len() as f64
}

/// Mean PCK over [`auc_thresholds`].
pub fn auc_from_errors(errors: &[f64]) -> f64 {
    let ts = auc_thresholds();
    ts.iter().map(|&t| pck_from_errors(errors, t)).sum::<f64>() / ts.len() as f64
}

/// `(PCK at threshold_mm, AUC)`, both in percent.
pub fn pck_auc(pred: &[Mat], target: &[Mat], threshold_mm: f64) -> Result<(f64, f64)> {
    if !(threshold_mm > 0.0) {
        return Err(Error::param(format!("threshold must be positive, got {threshold_mm}")));
    }
    let errs = joint_errors(pred, target)?;
    Ok((pck_from_errors(&errs, threshold_mm), auc_from_errors(&errs)))
}

/// All four metrics, plus a per-action breakdown of MPJPE / PA-MPJPE when
/// `actions` is given.
pub fn evaluate(pred: &[Mat], target: &[Mat], actions: Option<&[Option<String>]>) -> Result<EvalReport> {
    let mpjpe_mm = mpjpe(pred, target)?;
    let pa_mpjpe_mm = pa_mpjpe(pred, target)?;
    let (pck_percent, auc_percent) = pck_auc(pred, target, PCK_THRESHOLD_MM)?;
    let per_action = match actions {
        None => None,
        Some(tags) => {
            if tags.len() != pred.len() {
                return Err(Error::shape(format!("{} action tags for {} samples", tags.len(), pred.len())));
            }
            let mut groups: BTreeMap<String, (Vec<Mat>, Vec<Mat>)> = BTreeMap::new();
            for ((p, t), tag) in pred.iter().zip(target).zip(tags) {
                let key = tag.clone().unwrap_or_else(|| "unlabeled".to_string());
                let entry = groups.entry(key).or_default();
                entry.0.push(p.clone());
                entry.1.push(t.clone());
            }
            let mut table = BTreeMap::new();
            for (k, (p, t)) in groups {
                table.insert(
                    k,
                    ActionMetrics {
                        count: p.len(),
                        mpjpe: mpjpe(&p, &t)?,
                        pa_mpjpe: pa_mpjpe(&p, &t)?,
                    },
                );
            }
            Some(table)
        }
    };
    Ok(EvalReport {
        mpjpe_mm,
        pa_mpjpe_mm,
        pck_percent,
        auc_percent,
        per_action,
    })
}

/// Plain-text table with one column per action and a trailing average, one
/// row per metric.
pub fn format_action_table(report: &EvalReport) -> String {
    let Some(table) = &report.per_action else {
        return String::new();
    };
    let mut headers: Vec<String> = vec!["Metric".into()];
    headers.extend(table.keys().cloned());
    headers.push("Avg.".into());
    let row = |name: &str, pick: fn(&ActionMetrics) -> f64, avg: f64| {
        let mut cells = vec![name.to_string()];
        cells.extend(table.values().map(|m| format!("{:.1}", pick(m))));
        cells.push(format!("{avg:.1}"));
        cells
    };
    let rows = [
        headers,
        row("MPJPE", |m| m.mpjpe, report.mpjpe_mm),
        row("PA-MPJPE", |m| m.pa_mpjpe, report.pa_mpjpe_mm),
    ];
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in &rows {
        let line: Vec<String> = r
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (cell, w))| if c == 0 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

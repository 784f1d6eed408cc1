//! Central finite-difference verification of [`Model::backward`].

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::graph::SkeletonGraph;
use crate::net::loss::pose_loss;
use crate::net::model::{Mode, Model, ModelConfig};
use crate::{Mat, Result};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
const TARGET_NOISE: f64 = 0.1;

#[derive(Debug, Clone, Serialize)]
pub struct GroupReport {
    pub group: String,
    pub entries: usize,
    pub max_rel_error: f64,
    /// Parameter holding the worst entry.
    pub worst: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub groups: Vec<GroupReport>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }
}

/// Finite-difference scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Difference {
    /// `(f(p+h) − f(p−h)) / 2h`
    Central,
    /// `(−f(p+2h) + 8f(p+h) − 8f(p−h) + f(p−2h)) / 12h`
    FourthOrder,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare analytic gradients with central differences for every trainable
/// scalar.
pub fn gradcheck(
    model: &mut Model,
    inputs: &[Mat],
    targets: &[Mat],
    mode: Mode,
    step: f64,
    tolerance: f64,
) -> Result<GradcheckReport> {
    gradcheck_with(model, inputs, targets, mode, step, tolerance, Difference::Central)
}

pub fn gradcheck_with(
    model: &mut Model,
    inputs: &[Mat],
    targets: &[Mat],
    mode: Mode,
    step: f64,
    tolerance: f64,
    scheme: Difference,
) -> Result<GradcheckReport> {
    let alpha = model.config().alpha;
    let (_, grads, _) = model.loss_and_grad(inputs, targets, mode)?;
    let refs: Vec<(&'static str, String, bool)> = model
        .params()
        .matrices()
        .iter()
        .map(|p| (p.group, p.name.clone(), model.is_trainable(p.group)))
        .collect();
    let analytic: Vec<Mat> = grads.matrices().iter().map(|p| p.value.clone()).collect();

    let mut groups: BTreeMap<&'static str, GroupReport> = BTreeMap::new();
    for (k, (group, name, trainable)) in refs.into_iter().enumerate() {
        if !trainable {
            continue;
        }
        let entry = groups.entry(group).or_insert_with(|| GroupReport {
            group: group.to_string(),
            entries: 0,
            max_rel_error: 0.0,
            worst: String::new(),
        });
        for e in 0..analytic[k].len() {
            let orig = model.params().matrices()[k].value[e];
            let mut f = |d: f64| -> Result<f64> {
                model.params_mut().matrices_mut()[k][e] = orig + d;
                let loss = pose_loss(&model.forward(inputs, mode)?, targets, alpha);
                model.params_mut().matrices_mut()[k][e] = orig;
                loss
            };
            let numeric = match scheme {
                Difference::Central => (f(step)? - f(-step)?) / (2.0 * step),
                Difference::FourthOrder => {
                    (-f(2.0 * step)? + 8.0 * f(step)? - 8.0 * f(-step)? + f(-2.0 * step)?) / (12.0 * step)
                }
            };
            let rel = relative_error(analytic[k][e], numeric);
            entry.entries += 1;
            if rel > entry.max_rel_error || entry.worst.is_empty() {
                entry.max_rel_error = entry.max_rel_error.max(rel);
                entry.worst = name.clone();
            }
        }
    }
    Ok(GradcheckReport {
        step,
        tolerance,
        groups: groups.into_values().collect(),
    })
}

/// A model with a batch and the mode (dropout mask) to check it under.
pub struct Problem {
    pub model: Model,
    pub inputs: Vec<Mat>,
    pub targets: Vec<Mat>,
    pub mode: Mode,
}

impl Problem {
    pub fn run(&mut self, step: f64, tolerance: f64) -> Result<GradcheckReport> {
        gradcheck(&mut self.model, &self.inputs, &self.targets, self.mode, step, tolerance)
    }
}

/// The standard check problem: a 5-joint tree, 8 channels, 2 blocks,
/// non-local block and refinement enabled, dropout active with a fixed mask,
/// and every parameter randomized so no path hides behind a zero
/// initialization.
pub fn fixture(seed: u64) -> Result<Problem> {
    let topology = SkeletonGraph::new_tree(5, &[(0, 1), (1, 2), (0, 3), (3, 4)], 0)?;
    let config = ModelConfig {
        num_joints: 5,
        channels: 8,
        num_blocks: 2,
        refine_hidden: 16,
        ..ModelConfig::default()
    };
    fixture_with(config, &topology, seed)
}

/// Targets sit within ±0.1 of the prediction. A central difference carries
/// an absolute roundoff of about `ulp(loss) / step`, so a small loss keeps
/// that noise well under the tolerance even for the small gradients of
/// layers feeding a layer norm.
pub fn fixture_with(config: ModelConfig, topology: &SkeletonGraph, seed: u64) -> Result<Problem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::new(config, topology, rng.random())?;
    for (m, p) in model.params_mut().matrices_mut().into_iter().zip(0..) {
        let scale = if p % 2 == 0 { 0.5 } else { 0.3 };
        m.apply(|v| *v += rng.random_range(-scale..scale));
    }
    let cfg = model.config().clone();
    let inputs: Vec<Mat> = (0..3)
        .map(|_| Mat::from_fn(cfg.num_joints, cfg.input_dim, |_, _| rng.random_range(-1.0..1.0)))
        .collect();
    let mode = Mode::Train { seed: rng.random() };
    let targets = model
        .forward(&inputs, mode)?
        .into_iter()
        .map(|p| p.map(|v| v + rng.random_range(-TARGET_NOISE..TARGET_NOISE)))
        .collect();
    Ok(Problem {
        model,
        inputs,
        targets,
        mode,
    })
}

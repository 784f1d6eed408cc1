//! Mini-batch training with AMSGrad, and checkpoints.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    compute_norm_stats, read_json, standardize_2d, write_json_atomic, zero_center_root, DatasetFile, NormStats,
};
use crate::graph::{SkeletonGraph, TopologyJson};
use crate::metrics::mpjpe;
use crate::net::model::{Mode, Model, ModelConfig, ModelParams, RunningStats};
use crate::net::optim::{learning_rate, AmsGrad, DEFAULT_DECAY_EVERY, DEFAULT_LR, DEFAULT_LR_DECAY};
use crate::{Error, Mat, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 512,
            lr: DEFAULT_LR,
            lr_decay: DEFAULT_LR_DECAY,
            decay_every: DEFAULT_DECAY_EVERY,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.decay_every == 0 {
            return Err(Error::param("batch size and decay interval must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::param("learning rate must be positive and decay in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Eval-mode MPJPE on the training set, in millimetres.
    pub mpjpe_mm: f64,
}

/// Network-ready tensors of a dataset.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub inputs: Vec<Mat>,
    /// Standardized 3D targets.
    pub targets: Vec<Mat>,
    pub targets_mm: Vec<Mat>,
    pub root_index: usize,
}

fn norm3d(norm: &NormStats) -> Result<(&[[f64; 3]], &[[f64; 3]])> {
    match (&norm.mean3d, &norm.std3d) {
        (Some(m), Some(s)) => Ok((m, s)),
        _ => Err(Error::param("normalization statistics lack 3D mean/std")),
    }
}

impl TrainingData {
    pub fn new(dataset: &DatasetFile, norm: &NormStats) -> Result<Self> {
        dataset.validate()?;
        if dataset.records.is_empty() {
            return Err(Error::param("dataset has no records"));
        }
        let (mean3d, std3d) = norm3d(norm)?;
        let root_index = dataset.graph()?.root_index();
        let records = zero_center_root(&dataset.records, root_index);
        let (standardized, _) = standardize_2d(&records, Some(norm))?;
        let inputs = standardized.iter().map(|r| r.pose2d_mat()).collect();
        let targets_mm: Vec<Mat> = records.iter().map(|r| r.pose3d_mat()).collect();
        let targets = targets_mm
            .iter()
            .map(|t| Mat::from_fn(t.nrows(), 3, |j, c| (t[(j, c)] - mean3d[j][c]) / std3d[j][c]))
            .collect();
        Ok(TrainingData {
            inputs,
            targets,
            targets_mm,
            root_index,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Map network outputs back to millimetres and move the predicted root to
/// the origin, matching the root-centred targets.
pub fn to_millimetres(pred: &[Mat], norm: &NormStats, root_index: usize) -> Result<Vec<Mat>> {
    let (mean3d, std3d) = norm3d(norm)?;
    Ok(pred
        .iter()
        .map(|p| {
            let mm = Mat::from_fn(p.nrows(), 3, |j, c| p[(j, c)] * std3d[j][c] + mean3d[j][c]);
            let root = mm.row(root_index).clone_owned();
            Mat::from_fn(mm.nrows(), 3, |j, c| mm[(j, c)] - root[c])
        })
        .collect())
}

/// Eval-mode predictions in millimetres, computed in chunks.
pub fn predict_mm(model: &Model, inputs: &[Mat], norm: &NormStats, root_index: usize) -> Result<Vec<Mat>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(1024) {
        out.extend(to_millimetres(&model.forward(chunk, Mode::Eval)?, norm, root_index)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub topology: TopologyJson,
    pub params: ModelParams,
    pub running_stats: Vec<RunningStats>,
    pub optimizer: AmsGrad,
    /// Completed epochs.
    pub epoch: usize,
    pub norm: NormStats,
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json_atomic(path, self)
    }

    pub fn model(&self) -> Result<Model> {
        let topology = SkeletonGraph::from_json(&self.topology)?;
        Model::from_parts(
            self.model_config.clone(),
            &topology,
            self.params.clone(),
            self.running_stats.clone(),
        )
    }
}

pub struct Trainer {
    model: Model,
    optimizer: AmsGrad,
    config: TrainConfig,
    topology: SkeletonGraph,
    norm: NormStats,
    epoch: usize,
    history: Vec<EpochRecord>,
}

impl Trainer {
    /// Fresh model; normalization statistics come from the root-centred
    /// training records.
    pub fn new(dataset: &DatasetFile, model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let topology = dataset.graph()?;
        if model_config.num_joints != topology.num_joints() {
            return Err(Error::shape(format!(
                "model expects {} joints, dataset has {}",
                model_config.num_joints,
                topology.num_joints()
            )));
        }
        let norm = compute_norm_stats(&zero_center_root(&dataset.records, topology.root_index()))?;
        let model = Model::new(model_config, &topology, config.seed)?;
        let optimizer = AmsGrad::new(model.params());
        Ok(Trainer {
            model,
            optimizer,
            config,
            topology,
            norm,
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.train_config.validate()?;
        let model = ckpt.model()?;
        if !ckpt.optimizer.matches(model.params()) {
            return Err(Error::shape("optimizer state does not match the parameters"));
        }
        Ok(Trainer {
            model,
            optimizer: ckpt.optimizer,
            config: ckpt.train_config,
            topology: SkeletonGraph::from_json(&ckpt.topology)?,
            norm: ckpt.norm,
            epoch: ckpt.epoch,
            history: ckpt.history,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn set_epochs(&mut self, epochs: usize) {
        self.config.epochs = epochs;
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn norm(&self) -> &NormStats {
        &self.norm
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    pub fn data(&self, dataset: &DatasetFile) -> Result<TrainingData> {
        if dataset.topology != self.topology.to_json() {
            return Err(Error::InvalidGraph("dataset topology differs from the model's".into()));
        }
        TrainingData::new(dataset, &self.norm)
    }

    /// One pass over the data. The shuffle and dropout masks depend only on
    /// the seed and the epoch number, so resumed runs repeat the same stream.
    pub fn run_epoch(&mut self, data: &TrainingData) -> Result<EpochRecord> {
        let epoch = self.epoch;
        let lr = learning_rate(self.config.lr, self.config.lr_decay, self.config.decay_every, epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);

        let mut total = 0.0;
        for (b, idx) in order.chunks(self.config.batch_size).enumerate() {
            let inputs: Vec<Mat> = idx.iter().map(|&i| data.inputs[i].clone()).collect();
            let targets: Vec<Mat> = idx.iter().map(|&i| data.targets[i].clone()).collect();
            let mode = Mode::Train { seed: rng.random() };
            let (loss, grads, tape) = self
                .model
                .loss_and_grad(&inputs, &targets, mode)
                .map_err(|e| Error::NonFinite(format!("training diverged at epoch {}, batch {b}: {e}", epoch + 1)))?;
            self.optimizer.step(self.model.params_mut(), &grads, lr);
            self.model.update_running_stats(&tape);
            total += loss * idx.len() as f64;
        }
        let pred = predict_mm(&self.model, &data.inputs, &self.norm, data.root_index)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: total / data.len() as f64,
            mpjpe_mm: mpjpe(&pred, &data.targets_mm)?,
        };
        log::info!(
            "epoch {} lr {:.6} loss {:.6} mpjpe {:.2} mm",
            record.epoch,
            record.lr,
            record.train_loss,
            record.mpjpe_mm
        );
        self.history.push(record.clone());
        self.epoch += 1;
        Ok(record)
    }

    pub fn run(&mut self, data: &TrainingData) -> Result<()> {
        while !self.done() {
            self.run_epoch(data)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model_config: self.model.config().clone(),
            train_config: self.config.clone(),
            topology: self.topology.to_json(),
            params: self.model.params().clone(),
            running_stats: self.model.running_stats().to_vec(),
            optimizer: self.optimizer.clone(),
            epoch: self.epoch,
            norm: self.norm.clone(),
            history: self.history.clone(),
        }
    }

    pub fn into_model(self) -> Model {
        self.model
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub norm: NormStats,
    pub history: Vec<EpochRecord>,
}

/// Train a fresh model on `dataset` for `config.epochs` epochs.
pub fn train(dataset: &DatasetFile, model_config: ModelConfig, config: TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(dataset, model_config, config)?;
    let data = trainer.data(dataset)?;
    trainer.run(&data)?;
    Ok(TrainOutcome {
        norm: trainer.norm.clone(),
        history: trainer.history.clone(),
        model: trainer.into_model(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthesize_poses;

    fn setup(count: usize) -> (DatasetFile, ModelConfig, TrainConfig) {
        let topo = SkeletonGraph::new_tree(5, &[(0, 1), (1, 2), (0, 3), (3, 4)], 0).unwrap();
        let ds = synthesize_poses(&topo, count, 3).unwrap();
        let mc = ModelConfig {
            num_joints: 5,
            channels: 8,
            num_blocks: 1,
            refine_hidden: 8,
            ..ModelConfig::default()
        };
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 8,
            seed: 5,
            ..TrainConfig::default()
        };
        (ds, mc, tc)
    }

    #[test]
    fn same_seed_same_history() {
        let (ds, mc, tc) = setup(20);
        let a = train(&ds, mc.clone(), tc.clone()).unwrap();
        let b = train(&ds, mc.clone(), tc.clone()).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model.params(), b.model.params());
        let c = train(&ds, mc, TrainConfig { seed: 6, ..tc }).unwrap();
        assert_ne!(a.history, c.history);
    }

    #[test]
    fn history_and_schedule() {
        let (ds, mc, tc) = setup(12);
        let out = train(&ds, mc, TrainConfig { epochs: 5, decay_every: 2, ..tc }).unwrap();
        let lrs: Vec<f64> = out.history.iter().map(|r| r.lr).collect();
        assert_eq!(lrs[0], lrs[1]);
        assert!((lrs[2] - lrs[0] * DEFAULT_LR_DECAY).abs() < 1e-15);
        assert_eq!(out.history.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5]);
        assert!(out.history.iter().all(|r| r.train_loss.is_finite() && r.mpjpe_mm >= 0.0));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (ds, mc, tc) = setup(16);
        let full = train(&ds, mc.clone(), TrainConfig { epochs: 4, ..tc.clone() }).unwrap();

        let mut first = Trainer::new(&ds, mc, TrainConfig { epochs: 2, ..tc }).unwrap();
        let data = first.data(&ds).unwrap();
        first.run(&data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        first.checkpoint().save(&path).unwrap();

        let mut resumed = Trainer::from_checkpoint(Checkpoint::load(&path).unwrap()).unwrap();
        resumed.set_epochs(4);
        resumed.run(&data).unwrap();
        assert_eq!(resumed.history(), &full.history[..]);
        assert_eq!(resumed.model().params(), full.model.params());
    }

    #[test]
    fn batchnorm_training_updates_running_stats() {
        let (ds, mut mc, tc) = setup(16);
        mc.block_style = crate::net::model::BlockStyle::BatchnormRelu;
        let out = train(&ds, mc, tc).unwrap();
        assert!(out.model.running_stats().iter().any(|r| r.mean.iter().any(|&m| m != 0.0)));
    }

    #[test]
    fn divergence_is_reported() {
        let (ds, mc, tc) = setup(8);
        let mut trainer = Trainer::new(&ds, mc, tc).unwrap();
        let data = trainer.data(&ds).unwrap();
        trainer.model.params_mut().layers[1].weight.fill(f64::MAX);
        match trainer.run_epoch(&data) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("epoch 1"), "{msg}"),
            other => panic!("expected divergence, got {:?}", other.map(|r| r.train_loss)),
        }
    }

    #[test]
    fn rejects_mismatched_topology() {
        let (ds, mut mc, tc) = setup(8);
        mc.num_joints = 6;
        assert!(Trainer::new(&ds, mc, tc).is_err());
    }

    #[test]
    fn targets_are_root_centred() {
        let (mut ds, _, _) = setup(6);
        let norm = compute_norm_stats(&ds.records).unwrap();
        let centred = TrainingData::new(&ds, &norm).unwrap();
        for r in &mut ds.records {
            for p in &mut r.pose3d {
                p[0] += 250.0;
                p[2] -= 40.0;
            }
        }
        let shifted = TrainingData::new(&ds, &norm).unwrap();
        for (a, b) in shifted.targets_mm.iter().zip(&centred.targets_mm) {
            assert!((a - b).amax() < 1e-9);
        }
        assert!(shifted.targets_mm.iter().all(|t| t.row(0).iter().all(|&v| v == 0.0)));
    }
}

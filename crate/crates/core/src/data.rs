//! Pose datasets: file format, preprocessing and synthetic generation.

use std::io::Write;
use std::path::Path;

use nalgebra::{Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::graph::{human36m_topology, H36mVariant, SkeletonGraph, TopologyJson};
use crate::{Error, Mat, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub pose2d: Vec<[f64; 2]>,
    /// Millimetres, root-centred after preprocessing.
    pub pose3d: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
}

impl PoseRecord {
    pub fn pose2d_mat(&self) -> Mat {
        Mat::from_fn(self.pose2d.len(), 2, |i, j| self.pose2d[i][j])
    }

    pub fn pose3d_mat(&self) -> Mat {
        Mat::from_fn(self.pose3d.len(), 3, |i, j| self.pose3d[i][j])
    }

    fn validate(&self, index: usize, num_joints: usize) -> Result<()> {
        let bad = |reason: String| Error::InvalidRecord { index, reason };
        if self.pose2d.len() != num_joints {
            return Err(bad(format!(
                "pose2d has {} joints, topology has {num_joints}",
                self.pose2d.len()
            )));
        }
        if self.pose3d.len() != num_joints {
            return Err(bad(format!(
                "pose3d has {} joints, topology has {num_joints}",
                self.pose3d.len()
            )));
        }
        let finite = self.pose2d.iter().flatten().chain(self.pose3d.iter().flatten()).all(|v| v.is_finite());
        if !finite {
            return Err(bad("non-finite coordinate".into()));
        }
        Ok(())
    }
}

/// Per joint-coordinate normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean2d: Vec<[f64; 2]>,
    pub std2d: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean3d: Option<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std3d: Option<Vec<[f64; 3]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub topology: TopologyJson,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm: Option<NormStats>,
    pub records: Vec<PoseRecord>,
}

impl DatasetFile {
    pub fn graph(&self) -> Result<SkeletonGraph> {
        SkeletonGraph::from_json(&self.topology)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.graph()?.num_joints();
        for (i, r) in self.records.iter().enumerate() {
            r.validate(i, n)?;
        }
        if let Some(norm) = &self.norm {
            if norm.mean2d.len() != n || norm.std2d.len() != n {
                return Err(Error::shape("normalization statistics do not match the joint count"));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ds: DatasetFile = read_json(path)?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json_atomic(path, self)
    }
}

pub fn load_dataset(path: &Path) -> Result<DatasetFile> {
    DatasetFile::load(path)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| Error::Parse {
        path: path.to_path_buf(),
        source,
    })
}

/// Serialize to a temporary file next to `path`, then rename over it.
pub fn write_json_atomic<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e.into(),
    })?;
    text.push('\n');
    tmp.write_all(text.as_bytes()).map_err(io_err)?;
    tmp.as_file().sync_all().map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

/// Subtract the root joint from every 3D joint of every record.
pub fn zero_center_root(records: &[PoseRecord], root_index: usize) -> Vec<PoseRecord> {
    records
        .iter()
        .map(|r| {
            let root = r.pose3d[root_index];
            let mut out = r.clone();
            for p in &mut out.pose3d {
                for c in 0..3 {
                    p[c] -= root[c];
                }
            }
            out
        })
        .collect()
}

fn mean_std<const D: usize>(rows: impl Iterator<Item = Vec<[f64; D]>> + Clone, n: usize, what: &str) -> (Vec<[f64; D]>, Vec<[f64; D]>) {
    let count = rows.clone().count() as f64;
    let mut mean = vec![[0.0; D]; n];
    for r in rows.clone() {
        for (m, p) in mean.iter_mut().zip(&r) {
            for c in 0..D {
                m[c] += p[c] / count;
            }
        }
    }
    let mut var = vec![[0.0; D]; n];
    for r in rows {
        for ((v, p), m) in var.iter_mut().zip(&r).zip(&mean) {
            for c in 0..D {
                v[c] += (p[c] - m[c]).powi(2) / count;
            }
        }
    }
    let std = var
        .iter()
        .enumerate()
        .map(|(j, v)| {
            let mut s = [0.0; D];
            for c in 0..D {
                s[c] = v[c].sqrt();
                if s[c] <= 1e-12 {
                    // the root of root-centred data is identically zero
                    if mean[j][c] != 0.0 {
                        log::warn!("{what} joint {j} coordinate {c} has zero spread; left unscaled");
                    }
                    s[c] = 1.0;
                }
            }
            s
        })
        .collect();
    (mean, std)
}

/// Mean and standard deviation per joint coordinate, for both 2D inputs and
/// 3D targets. Coordinates with zero spread get a unit scale (and a warning)
/// so they pass through unscaled.
pub fn compute_norm_stats(records: &[PoseRecord]) -> Result<NormStats> {
    let first = records.first().ok_or_else(|| Error::param("no records to normalize"))?;
    let n = first.pose2d.len();
    let (mean2d, std2d) = mean_std(records.iter().map(|r| r.pose2d.clone()), n, "2D");
    let (mean3d, std3d) = mean_std(records.iter().map(|r| r.pose3d.clone()), n, "3D");
    Ok(NormStats {
        mean2d,
        std2d,
        mean3d: Some(mean3d),
        std3d: Some(std3d),
    })
}

/// Standardize 2D inputs with `stats`, or with statistics computed from
/// `records` when none are given. Returns the statistics used.
pub fn standardize_2d(records: &[PoseRecord], stats: Option<&NormStats>) -> Result<(Vec<PoseRecord>, NormStats)> {
    let stats = match stats {
        Some(s) => s.clone(),
        None => compute_norm_stats(records)?,
    };
    let out = records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if r.pose2d.len() != stats.mean2d.len() {
                return Err(Error::InvalidRecord {
                    index: i,
                    reason: "joint count differs from the normalization statistics".into(),
                });
            }
            let mut out = r.clone();
            for ((p, m), s) in out.pose2d.iter_mut().zip(&stats.mean2d).zip(&stats.std2d) {
                for c in 0..2 {
                    p[c] = (p[c] - m[c]) / s[c];
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((out, stats))
}

/// Inverse of [`standardize_2d`].
pub fn destandardize_2d(records: &[PoseRecord], stats: &NormStats) -> Vec<PoseRecord> {
    records
        .iter()
        .map(|r| {
            let mut out = r.clone();
            for ((p, m), s) in out.pose2d.iter_mut().zip(&stats.mean2d).zip(&stats.std2d) {
                for c in 0..2 {
                    p[c] = p[c] * s[c] + m[c];
                }
            }
            out
        })
        .collect()
}

/// Pinhole camera looking down +z at a subject placed `distance` away.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub focal: f64,
    pub distance: f64,
}

pub const SYNTH_CAMERA: Camera = Camera {
    focal: 1000.0,
    distance: 4000.0,
};

impl Camera {
    /// `u = f·x/(z+D)`, `v = −f·y/(z+D)`: image v grows downwards.
    pub fn project(&self, p: [f64; 3]) -> [f64; 2] {
        let depth = p[2] + self.distance;
        [self.focal * p[0] / depth, -self.focal * p[1] / depth]
    }
}

const ACTIONS: [&str; 5] = ["Directions", "Eating", "Posing", "Sitting", "Walking"];
const SUBJECTS: [&str; 5] = ["S1", "S5", "S6", "S7", "S8"];

/// Rest-pose bone offset from the parent (mm, x to the subject's left, y up,
/// z away from the camera) and the largest joint rotation in radians.
fn h36m_bone(name: &str, parent: &str) -> ([f64; 3], f64) {
    match name {
        "RHip" => ([-130.0, 0.0, 0.0], 0.1),
        "LHip" => ([130.0, 0.0, 0.0], 0.1),
        "RKnee" | "LKnee" => ([0.0, -450.0, 0.0], 0.6),
        "RFoot" | "LFoot" => ([0.0, -440.0, 0.0], 0.8),
        "Spine" => ([0.0, 230.0, 0.0], 0.3),
        "Thorax" => ([0.0, 250.0, 0.0], 0.25),
        "Neck/Nose" => ([0.0, 110.0, -80.0], 0.3),
        "Head" if parent == "Thorax" => ([0.0, 230.0, -80.0], 0.3),
        "Head" => ([0.0, 120.0, 80.0], 0.2),
        "LShoulder" => ([150.0, -20.0, 0.0], 0.2),
        "RShoulder" => ([-150.0, -20.0, 0.0], 0.2),
        "LElbow" | "RElbow" => ([0.0, -280.0, 0.0], 1.0),
        "LWrist" | "RWrist" => ([0.0, -250.0, 0.0], 1.0),
        _ => ([0.0, 200.0, 0.0], 0.5),
    }
}

/// Fixed 200 mm bone for generic trees, direction derived from the joint id.
fn generic_bone(joint: usize) -> ([f64; 3], f64) {
    let a = joint as f64 * 2.399_963;
    let dir = Vector3::new(a.cos(), a.sin(), 0.3 * (1.7 * a).sin()).normalize() * 200.0;
    ([dir.x, dir.y, dir.z], 0.5)
}

fn is_h36m(topology: &SkeletonGraph) -> bool {
    H36mVariant::from_joint_count(topology.num_joints())
        .map(|v| {
            let reference = human36m_topology(v);
            reference.edges() == topology.edges() && reference.root_index() == topology.root_index()
        })
        .unwrap_or(false)
}

/// Rest offset and rotation range of every non-root joint.
pub fn bone_table(topology: &SkeletonGraph) -> Vec<Option<([f64; 3], f64)>> {
    let parents = topology.parents();
    let h36m = is_h36m(topology);
    let names: Vec<String> = match (h36m, topology.joint_names()) {
        (true, Some(n)) => n.to_vec(),
        (true, None) => human36m_topology(H36mVariant::from_joint_count(topology.num_joints()).unwrap())
            .joint_names()
            .unwrap()
            .to_vec(),
        _ => Vec::new(),
    };
    parents
        .iter()
        .enumerate()
        .map(|(j, p)| {
            p.map(|p| {
                if h36m {
                    h36m_bone(&names[j], &names[p])
                } else {
                    generic_bone(j)
                }
            })
        })
        .collect()
}

/// Fixed bone length of every edge, keyed as in [`SkeletonGraph::edges`].
pub fn bone_lengths(topology: &SkeletonGraph) -> Vec<f64> {
    let table = bone_table(topology);
    let parents = topology.parents();
    topology
        .edges()
        .iter()
        .map(|&(a, b)| {
            let child = if parents[b] == Some(a) { b } else { a };
            let o = table[child].expect("child joint has a bone").0;
            (o[0] * o[0] + o[1] * o[1] + o[2] * o[2]).sqrt()
        })
        .collect()
}

fn random_rotation(max_angle: f64, rng: &mut ChaCha8Rng) -> Rotation3<f64> {
    let axis = loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            break Unit::new_normalize(v);
        }
    };
    Rotation3::from_axis_angle(&axis, rng.random_range(-max_angle..=max_angle))
}

/// Deterministic articulated poses. Each joint gets a random local rotation,
/// drawn within its range, and 3D joints follow by forward kinematics from
/// the root, so every bone keeps its fixed length. The root sits at the
/// origin and the 2D pose is the projection through [`SYNTH_CAMERA`].
pub fn synthesize_poses(topology: &SkeletonGraph, count: usize, seed: u64) -> Result<DatasetFile> {
    if count == 0 {
        return Err(Error::param("count must be at least 1"));
    }
    topology.check_tree()?;
    let n = topology.num_joints();
    let parents = topology.parents();
    let order = topology.traversal_order();
    let table = bone_table(topology);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let records = (0..count)
        .map(|i| {
            let yaw = rng.random_range(-std::f64::consts::FRAC_PI_4..std::f64::consts::FRAC_PI_4);
            let global = Rotation3::from_axis_angle(&Vector3::y_axis(), yaw) * random_rotation(0.15, &mut rng);
            let mut rot = vec![Rotation3::identity(); n];
            let mut pos = vec![Vector3::zeros(); n];
            rot[topology.root_index()] = global;
            for &j in &order {
                let Some(p) = parents[j] else { continue };
                let (offset, range) = table[j].expect("non-root joint has a bone");
                rot[j] = rot[p] * random_rotation(range, &mut rng);
                pos[j] = pos[p] + rot[j] * Vector3::from(offset);
            }
            let pose3d: Vec<[f64; 3]> = pos.iter().map(|v| [v.x, v.y, v.z]).collect();
            let pose2d = pose3d.iter().map(|&p| SYNTH_CAMERA.project(p)).collect();
            PoseRecord {
                pose2d,
                pose3d,
                action: Some(ACTIONS[i % ACTIONS.len()].to_string()),
                subject: Some(SUBJECTS[(i / ACTIONS.len()) % SUBJECTS.len()].to_string()),
            }
        })
        .collect::<Vec<_>>();
    let norm = compute_norm_stats(&records)?;
    Ok(DatasetFile {
        topology: topology.to_json(),
        norm: Some(norm),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn h36m16() -> SkeletonGraph {
        human36m_topology(H36mVariant::Joints16)
    }

    #[test]
    fn save_load_round_trip() {
        let ds = synthesize_poses(&h36m16(), 8, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.json");
        ds.save(&path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
    }

    #[test]
    fn wrong_joint_count_names_record() {
        let mut ds = synthesize_poses(&h36m16(), 4, 2).unwrap();
        ds.records[2].pose2d.pop();
        ds.records[2].pose3d.pop();
        match ds.validate() {
            Err(Error::InvalidRecord { index, .. }) => assert_eq!(index, 2),
            other => panic!("expected an invalid record, got {other:?}"),
        }
        let mut ds = synthesize_poses(&h36m16(), 4, 2).unwrap();
        ds.records[3].pose3d[1][0] = f64::INFINITY;
        assert!(matches!(ds.validate(), Err(Error::InvalidRecord { index: 3, .. })));
    }

    #[test]
    fn parse_errors_carry_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, "{\n  \"topology\": {\"num_joints\": 2,\n  oops").unwrap();
        match load_dataset(&path) {
            Err(e @ Error::Parse { .. }) => assert!(e.to_string().contains("line 3"), "{e}"),
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn root_centering() {
        let mut ds = synthesize_poses(&h36m16(), 5, 3).unwrap();
        for r in &mut ds.records {
            for p in &mut r.pose3d {
                p[0] += 10.0;
                p[2] -= 3.5;
            }
        }
        let once = zero_center_root(&ds.records, 0);
        assert!(once.iter().all(|r| r.pose3d[0] == [0.0; 3]));
        assert_eq!(zero_center_root(&once, 0), once);
        let before = &ds.records[1].pose3d;
        let after = &once[1].pose3d;
        for j in 1..before.len() {
            for c in 0..3 {
                let d0 = before[j][c] - before[j - 1][c];
                let d1 = after[j][c] - after[j - 1][c];
                assert!((d0 - d1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn standardization() {
        let ds = synthesize_poses(&h36m16(), 200, 4).unwrap();
        let (norm, stats) = standardize_2d(&ds.records, None).unwrap();
        for j in 1..16 {
            for c in 0..2 {
                let vals: Vec<f64> = norm.iter().map(|r| r.pose2d[j][c]).collect();
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let s = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
                assert!(m.abs() < 1e-9 && (s - 1.0).abs() < 1e-9);
            }
        }
        // the root never moves, so its coordinates stay unscaled
        assert_eq!(stats.std2d[0], [1.0, 1.0]);
        let back = destandardize_2d(&norm, &stats);
        for (a, b) in back.iter().zip(&ds.records) {
            for (p, q) in a.pose2d.iter().zip(&b.pose2d) {
                assert!((p[0] - q[0]).abs() < 1e-10 && (p[1] - q[1]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn eval_split_uses_train_statistics() {
        let train = synthesize_poses(&h36m16(), 100, 5).unwrap();
        let mut eval = synthesize_poses(&h36m16(), 50, 6).unwrap();
        for r in &mut eval.records {
            for p in &mut r.pose2d {
                p[0] += 40.0;
            }
        }
        let (_, train_stats) = standardize_2d(&train.records, None).unwrap();
        let (with_train, used) = standardize_2d(&eval.records, Some(&train_stats)).unwrap();
        let (with_own, _) = standardize_2d(&eval.records, None).unwrap();
        assert_eq!(used, train_stats);
        let mean = |rs: &[PoseRecord]| rs.iter().map(|r| r.pose2d[5][0]).sum::<f64>() / rs.len() as f64;
        assert!(mean(&with_own).abs() < 1e-9);
        assert!(mean(&with_train) > 0.5);
    }

    #[test]
    fn synthesis_is_deterministic() {
        let a = serde_json::to_string(&synthesize_poses(&h36m16(), 16, 7).unwrap()).unwrap();
        let b = serde_json::to_string(&synthesize_poses(&h36m16(), 16, 7).unwrap()).unwrap();
        let c = serde_json::to_string(&synthesize_poses(&h36m16(), 16, 8).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn bones_keep_their_lengths() {
        for topo in [
            h36m16(),
            human36m_topology(H36mVariant::Joints17),
            SkeletonGraph::new_tree(5, &[(0, 1), (1, 2), (0, 3), (3, 4)], 0).unwrap(),
        ] {
            let ds = synthesize_poses(&topo, 32, 9).unwrap();
            let lengths = bone_lengths(&topo);
            for r in &ds.records {
                for (&(a, b), &len) in topo.edges().iter().zip(&lengths) {
                    let d: f64 = (0..3).map(|c| (r.pose3d[a][c] - r.pose3d[b][c]).powi(2)).sum::<f64>().sqrt();
                    assert!((d - len).abs() < 1e-9, "edge ({a},{b}): {d} vs {len}");
                }
            }
        }
    }

    #[test]
    fn projection_matches_camera() {
        let ds = synthesize_poses(&h36m16(), 10, 10).unwrap();
        for r in &ds.records {
            for (p2, p3) in r.pose2d.iter().zip(&r.pose3d) {
                let z = p3[2] + 4000.0;
                assert!((p2[0] - 1000.0 * p3[0] / z).abs() < 1e-12);
                assert!((p2[1] + 1000.0 * p3[1] / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn count_and_root() {
        let ds = synthesize_poses(&h36m16(), 64, 11).unwrap();
        assert_eq!(ds.records.len(), 64);
        assert!(ds.records.iter().all(|r| r.pose3d[0] == [0.0; 3]));
        assert!(synthesize_poses(&h36m16(), 0, 1).is_err());
    }
}

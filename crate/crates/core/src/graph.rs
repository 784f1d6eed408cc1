//! Skeleton graphs and the matrices derived from them.

use std::collections::{BTreeSet, VecDeque};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{linalg, Error, Mat, Result};

/// Joint names of the standard 17-joint Human3.6M layout, indexed by joint id.
pub const H36M_17_NAMES: [&str; 17] = [
    "Hip", "RHip", "RKnee", "RFoot", "LHip", "LKnee", "LFoot", "Spine", "Thorax", "Neck/Nose",
    "Head", "LShoulder", "LElbow", "LWrist", "RShoulder", "RElbow", "RWrist",
];

/// Kinematic tree of the 17-joint layout as (parent, child) pairs.
pub const H36M_17_EDGES: [(usize, usize); 16] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (0, 4),
    (4, 5),
    (5, 6),
    (0, 7),
    (7, 8),
    (8, 9),
    (9, 10),
    (8, 11),
    (11, 12),
    (12, 13),
    (8, 14),
    (14, 15),
    (15, 16),
];

/// The 16-joint layout drops "Neck/Nose" (17-joint index 9) and attaches the
/// head directly to the thorax.
pub const H36M_16_DROPPED: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum H36mVariant {
    Joints16,
    Joints17,
}

impl H36mVariant {
    pub fn from_joint_count(n: usize) -> Result<Self> {
        match n {
            16 => Ok(H36mVariant::Joints16),
            17 => Ok(H36mVariant::Joints17),
            other => Err(Error::param(format!(
                "Human3.6M topology has 16 or 17 joints, got {other}"
            ))),
        }
    }
}

/// Undirected graph over body joints. Edges are stored as `(min, max)` pairs in
/// insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonGraph {
    num_joints: usize,
    edges: Vec<(usize, usize)>,
    joint_names: Option<Vec<String>>,
    root_index: usize,
}

impl SkeletonGraph {
    pub fn new(num_joints: usize, edges: &[(usize, usize)], root_index: usize) -> Result<Self> {
        if num_joints == 0 {
            return Err(Error::InvalidGraph("graph has no joints".into()));
        }
        if root_index >= num_joints {
            return Err(Error::InvalidGraph(format!(
                "root {root_index} out of range for {num_joints} joints"
            )));
        }
        let mut seen = BTreeSet::new();
        let mut stored = Vec::with_capacity(edges.len());
        for &(a, b) in edges {
            if a >= num_joints || b >= num_joints {
                return Err(Error::InvalidGraph(format!(
                    "edge ({a}, {b}) out of range for {num_joints} joints"
                )));
            }
            if a == b {
                return Err(Error::InvalidGraph(format!("self-loop at joint {a}")));
            }
            let key = (a.min(b), a.max(b));
            if !seen.insert(key) {
                return Err(Error::InvalidGraph(format!("duplicate edge ({a}, {b})")));
            }
            stored.push(key);
        }
        Ok(SkeletonGraph {
            num_joints,
            edges: stored,
            joint_names: None,
            root_index,
        })
    }

    /// Like [`SkeletonGraph::new`] but additionally requires a spanning tree.
    pub fn new_tree(num_joints: usize, edges: &[(usize, usize)], root_index: usize) -> Result<Self> {
        let g = Self::new(num_joints, edges, root_index)?;
        g.check_tree()?;
        Ok(g)
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.num_joints {
            return Err(Error::InvalidGraph(format!(
                "{} names for {} joints",
                names.len(),
                self.num_joints
            )));
        }
        self.joint_names = Some(names);
        Ok(self)
    }

    pub fn num_joints(&self) -> usize {
        self.num_joints
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn joint_names(&self) -> Option<&[String]> {
        self.joint_names.as_deref()
    }

    pub fn root_index(&self) -> usize {
        self.root_index
    }

    pub fn neighbors(&self, joint: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter_map(|&(a, b)| match (a == joint, b == joint) {
                (true, _) => Some(b),
                (_, true) => Some(a),
                _ => None,
            })
            .collect()
    }

    /// Checks N-1 edges and connectivity from the root.
    pub fn check_tree(&self) -> Result<()> {
        if self.edges.len() + 1 != self.num_joints {
            return Err(Error::InvalidGraph(format!(
                "a tree over {} joints needs {} edges, got {}",
                self.num_joints,
                self.num_joints - 1,
                self.edges.len()
            )));
        }
        if self.parents().iter().filter(|p| p.is_none()).count() != 1 {
            return Err(Error::InvalidGraph("tree is not connected".into()));
        }
        Ok(())
    }

    pub fn is_tree(&self) -> bool {
        self.check_tree().is_ok()
    }

    /// Parent of every joint in a breadth-first traversal from the root;
    /// `None` for the root and for joints unreachable from it.
    pub fn parents(&self) -> Vec<Option<usize>> {
        let mut parent = vec![None; self.num_joints];
        let mut visited = vec![false; self.num_joints];
        let mut queue = VecDeque::from([self.root_index]);
        visited[self.root_index] = true;
        while let Some(j) = queue.pop_front() {
            for k in self.neighbors(j) {
                if !visited[k] {
                    visited[k] = true;
                    parent[k] = Some(j);
                    queue.push_back(k);
                }
            }
        }
        parent
    }

    /// Joints in breadth-first order from the root.
    pub fn traversal_order(&self) -> Vec<usize> {
        let mut order = Vec::with_capacity(self.num_joints);
        let mut visited = vec![false; self.num_joints];
        let mut queue = VecDeque::from([self.root_index]);
        visited[self.root_index] = true;
        while let Some(j) = queue.pop_front() {
            order.push(j);
            for k in self.neighbors(j) {
                if !visited[k] {
                    visited[k] = true;
                    queue.push_back(k);
                }
            }
        }
        order
    }

    /// Relabel joints so that old joint `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.num_joints {
            return Err(Error::param("permutation length differs from joint count"));
        }
        let edges: Vec<_> = self.edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
        Self::new(self.num_joints, &edges, perm[self.root_index])
    }

    pub fn adjacency(&self) -> AdjacencyMatrix {
        adjacency_from_graph(self)
    }

    pub fn to_json(&self) -> TopologyJson {
        TopologyJson {
            num_joints: self.num_joints,
            edges: self.edges.iter().map(|&(a, b)| [a, b]).collect(),
            root: self.root_index,
            names: self.joint_names.clone(),
        }
    }

    pub fn from_json(t: &TopologyJson) -> Result<Self> {
        let edges: Vec<_> = t.edges.iter().map(|e| (e[0], e[1])).collect();
        let g = Self::new(t.num_joints, &edges, t.root)?;
        match &t.names {
            Some(names) => g.with_names(names.clone()),
            None => Ok(g),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let t: TopologyJson = serde_json::from_str(&text).map_err(|source| Error::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&t)
    }
}

/// On-disk topology: `{"num_joints": int, "edges": [[i,j],...], "root": int, "names": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyJson {
    pub num_joints: usize,
    pub edges: Vec<[usize; 2]>,
    pub root: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub names: Option<Vec<String>>,
}

/// Standard Human3.6M kinematic tree rooted at the hip.
pub fn human36m_topology(variant: H36mVariant) -> SkeletonGraph {
    match variant {
        H36mVariant::Joints17 => SkeletonGraph::new(17, &H36M_17_EDGES, 0)
            .and_then(|g| g.with_names(H36M_17_NAMES.iter().map(|s| s.to_string()).collect()))
            .expect("static 17-joint table is valid"),
        H36mVariant::Joints16 => {
            let remap = |j: usize| if j > H36M_16_DROPPED { j - 1 } else { j };
            let edges: Vec<_> = H36M_17_EDGES
                .iter()
                .filter_map(|&(p, c)| match (p == H36M_16_DROPPED, c == H36M_16_DROPPED) {
                    (false, false) => Some((remap(p), remap(c))),
                    // thorax -> nose becomes thorax -> head
                    (false, true) => Some((remap(p), remap(10))),
                    _ => None,
                })
                .collect();
            let names = H36M_17_NAMES
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != H36M_16_DROPPED)
                .map(|(_, s)| s.to_string())
                .collect();
            SkeletonGraph::new(16, &edges, 0)
                .and_then(|g| g.with_names(names))
                .expect("static 16-joint table is valid")
        }
    }
}

/// Erdős–Rényi graph with edge probability `p`, rooted at joint 0. Used as a
/// source of arbitrary test topologies.
pub fn random_graph(num_joints: usize, p: f64, seed: u64) -> SkeletonGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for i in 0..num_joints {
        for j in (i + 1)..num_joints {
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    SkeletonGraph::new(num_joints, &edges, 0).expect("generated edges are valid")
}

/// Dense symmetric binary adjacency with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix(Mat);

impl AdjacencyMatrix {
    pub fn entries(&self) -> &Mat {
        &self.0
    }

    pub fn size(&self) -> usize {
        self.0.nrows()
    }

    pub fn degrees(&self) -> Vec<f64> {
        self.0.row_iter().map(|r| r.sum()).collect()
    }
}

pub fn adjacency_from_graph(g: &SkeletonGraph) -> AdjacencyMatrix {
    let n = g.num_joints();
    let mut a = Mat::zeros(n, n);
    for &(i, j) in g.edges() {
        a[(i, j)] = 1.0;
        a[(j, i)] = 1.0;
    }
    AdjacencyMatrix(a)
}

/// `D^{-1/2} A D^{-1/2}` together with the degree vector.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    entries: Mat,
    degree: Vec<f64>,
}

impl NormalizedAdjacency {
    pub fn entries(&self) -> &Mat {
        &self.entries
    }

    pub fn degree(&self) -> &[f64] {
        &self.degree
    }

    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    /// Symmetric relabelling `P Â Pᵀ` with old joint `i` moved to `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.size();
        let mut entries = Mat::zeros(n, n);
        let mut degree = vec![0.0; n];
        for i in 0..n {
            degree[perm[i]] = self.degree[i];
            for j in 0..n {
                entries[(perm[i], perm[j])] = self.entries[(i, j)];
            }
        }
        NormalizedAdjacency { entries, degree }
    }
}

/// Isolated joints get `deg^{-1/2} = 0`, so their row and column stay zero.
pub fn normalize_adjacency(a: &AdjacencyMatrix) -> NormalizedAdjacency {
    let degree = a.degrees();
    let n = a.size();
    let entries = Mat::from_fn(n, n, |i, j| {
        let v = a.entries()[(i, j)];
        if v == 0.0 {
            0.0
        } else {
            v / (degree[i] * degree[j]).sqrt()
        }
    });
    NormalizedAdjacency { entries, degree }
}

/// Normalized Laplacian `I - Â`.
pub fn laplacian(na: &NormalizedAdjacency) -> Mat {
    Mat::identity(na.size(), na.size()) - na.entries()
}

/// Splitting of `(1+β)I - βM` for a symmetric zero-diagonal `M` into the
/// scalar diagonal `1+β` and the strictly upper triangular part of `βM`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixSplit {
    lambda_beta: f64,
    upper: Mat,
    beta: f64,
}

impl MatrixSplit {
    /// Split an arbitrary symmetric zero-diagonal matrix (e.g. a modulated
    /// adjacency).
    pub fn from_symmetric(m: &Mat, beta: f64) -> Result<Self> {
        check_beta(beta)?;
        if !m.is_square() {
            return Err(Error::shape(format!("square matrix expected, got {:?}", m.shape())));
        }
        let scaled = m * beta;
        Ok(MatrixSplit {
            lambda_beta: 1.0 + beta,
            upper: linalg::strict_upper(&scaled),
            beta,
        })
    }

    pub fn lambda_beta(&self) -> f64 {
        self.lambda_beta
    }

    pub fn upper(&self) -> &Mat {
        &self.upper
    }

    pub fn lower(&self) -> Mat {
        self.upper.transpose()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn size(&self) -> usize {
        self.upper.nrows()
    }

    /// `upper + upperᵀ`, equal to `βM` for the split matrix `M`.
    pub fn reconstruct(&self) -> Mat {
        &self.upper + self.upper.transpose()
    }

    /// The full system matrix `(1+β)I - (upper + upperᵀ)`.
    pub fn system_matrix(&self) -> Mat {
        Mat::identity(self.size(), self.size()) * self.lambda_beta - self.reconstruct()
    }
}

pub fn triangular_split(na: &NormalizedAdjacency, beta: f64) -> Result<MatrixSplit> {
    MatrixSplit::from_symmetric(na.entries(), beta)
}

pub(crate) fn check_beta(beta: f64) -> Result<()> {
    if (0.0..1.0).contains(&beta) {
        Ok(())
    } else {
        Err(Error::param(format!("beta must lie in [0, 1), got {beta}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn path3() -> SkeletonGraph {
        SkeletonGraph::new(3, &[(0, 1), (1, 2)], 0).unwrap()
    }

    #[test]
    fn h36m_17_is_rooted_tree() {
        let g = human36m_topology(H36mVariant::Joints17);
        assert_eq!(g.num_joints(), 17);
        assert_eq!(g.edges().len(), 16);
        assert!(g.is_tree());
        assert_eq!(g.joint_names().unwrap()[g.root_index()], "Hip");
    }

    #[test]
    fn h36m_16_drops_nose() {
        let g = human36m_topology(H36mVariant::Joints16);
        assert_eq!(g.num_joints(), 16);
        assert_eq!(g.edges().len(), 15);
        assert!(g.is_tree());
        let names = g.joint_names().unwrap();
        assert!(!names.iter().any(|n| n == "Neck/Nose"));
        let thorax = names.iter().position(|n| n == "Thorax").unwrap();
        let head = names.iter().position(|n| n == "Head").unwrap();
        assert!(g.neighbors(thorax).contains(&head));
        assert_eq!(names[g.root_index()], "Hip");
    }

    #[test]
    fn h36m_adjacency_symmetric_zero_diagonal() {
        for v in [H36mVariant::Joints16, H36mVariant::Joints17] {
            let a = human36m_topology(v).adjacency();
            assert_eq!(a.entries(), &a.entries().transpose());
            assert!(a.entries().diagonal().iter().all(|&d| d == 0.0));
        }
    }

    #[test]
    fn variant_from_count() {
        assert!(H36mVariant::from_joint_count(15).is_err());
        assert_eq!(H36mVariant::from_joint_count(16).unwrap(), H36mVariant::Joints16);
    }

    #[test]
    fn rejects_invalid_edges() {
        assert!(SkeletonGraph::new(3, &[(0, 3)], 0).is_err());
        assert!(SkeletonGraph::new(3, &[(1, 1)], 0).is_err());
        assert!(SkeletonGraph::new(3, &[(0, 1), (1, 0)], 0).is_err());
        assert!(SkeletonGraph::new(3, &[(0, 1)], 5).is_err());
        assert!(SkeletonGraph::new_tree(3, &[(0, 1)], 0).is_err());
        assert!(SkeletonGraph::new_tree(4, &[(0, 1), (1, 2), (0, 2)], 0).is_err());
    }

    #[test]
    fn adjacency_examples() {
        let two = SkeletonGraph::new(2, &[(0, 1)], 0).unwrap().adjacency();
        assert_eq!(two.entries(), &Mat::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));

        let empty = SkeletonGraph::new(4, &[], 0).unwrap().adjacency();
        assert_eq!(empty.entries(), &Mat::zeros(4, 4));

        let a = path3().adjacency();
        assert_eq!(a.entries().row(1).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 1.0]);
    }

    #[test]
    fn normalize_examples() {
        let two = normalize_adjacency(&SkeletonGraph::new(2, &[(0, 1)], 0).unwrap().adjacency());
        assert_eq!(two.entries(), &Mat::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));

        let p = normalize_adjacency(&path3().adjacency());
        let expected = 1.0 / 2f64.sqrt();
        assert!((p.entries()[(0, 1)] - expected).abs() < 1e-15);
        assert!((p.entries()[(1, 2)] - expected).abs() < 1e-15);
        assert_eq!(p.entries()[(0, 2)], 0.0);

        let iso = normalize_adjacency(&SkeletonGraph::new(3, &[(0, 1)], 0).unwrap().adjacency());
        assert!(iso.entries().row(2).iter().all(|&v| v == 0.0));
        assert!(iso.entries().column(2).iter().all(|&v| v == 0.0));
        assert_eq!(laplacian(&iso)[(2, 2)], 1.0);
    }

    #[test]
    fn laplacian_examples() {
        let two = normalize_adjacency(&SkeletonGraph::new(2, &[(0, 1)], 0).unwrap().adjacency());
        assert_eq!(laplacian(&two), Mat::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));

        // 5-cycle is 2-regular
        let cycle = SkeletonGraph::new(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)], 0).unwrap();
        let l = laplacian(&normalize_adjacency(&cycle.adjacency()));
        let ones = nalgebra::DVector::from_element(5, 1.0);
        assert!((l * ones).norm() < 1e-15);
    }

    #[test]
    fn split_examples() {
        let na = normalize_adjacency(&SkeletonGraph::new(2, &[(0, 1)], 0).unwrap().adjacency());
        let s = triangular_split(&na, 0.2).unwrap();
        assert_eq!(s.lambda_beta(), 1.2);
        assert_eq!(s.upper(), &Mat::from_row_slice(2, 2, &[0.0, 0.2, 0.0, 0.0]));
        assert!(triangular_split(&na, 1.0).is_err());
        assert!(triangular_split(&na, -0.1).is_err());
        assert!(triangular_split(&na, 0.0).is_ok());
    }

    proptest! {
        #[test]
        fn normalized_entries_symmetric_in_unit_range(n in 1usize..50, p in 0.0f64..1.0, seed: u64) {
            let na = normalize_adjacency(&random_graph(n, p, seed).adjacency());
            let e = na.entries();
            prop_assert_eq!(e, &e.transpose());
            prop_assert!(e.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!(e.diagonal().iter().all(|&v| v == 0.0));
        }

        #[test]
        fn shifted_laplacian_identity(n in 1usize..40, p in 0.0f64..1.0, seed: u64, beta in 0.0f64..1.0) {
            let na = normalize_adjacency(&random_graph(n, p, seed).adjacency());
            let id = Mat::identity(n, n);
            let lhs = &id + laplacian(&na) * beta;
            let rhs = &id * (1.0 + beta) - na.entries() * beta;
            prop_assert!((lhs - rhs).amax() <= 4.0 * f64::EPSILON);
        }

        #[test]
        fn split_reconstructs_scaled_adjacency(n in 1usize..40, p in 0.0f64..1.0, seed: u64, beta in 0.0f64..1.0) {
            let na = normalize_adjacency(&random_graph(n, p, seed).adjacency());
            let s = triangular_split(&na, beta).unwrap();
            prop_assert_eq!(linalg::strict_upper(s.upper()), s.upper().clone());
            // upper holds fl(β·Â_ij) verbatim, so reconstruction is bit-exact
            prop_assert_eq!(s.reconstruct(), na.entries() * beta);
        }
    }

    #[test]
    fn laplacian_spectrum_in_0_2() {
        for seed in 0..20 {
            let g = random_graph(3 + (seed as usize % 20), 0.3, seed);
            let vals = linalg::symmetric_eigenvalues(&laplacian(&normalize_adjacency(&g.adjacency())));
            assert!(vals[0] >= -1e-12, "{vals:?}");
            assert!(*vals.last().unwrap() <= 2.0 + 1e-12, "{vals:?}");
        }
    }

    #[test]
    fn json_round_trip() {
        let g = human36m_topology(H36mVariant::Joints16);
        let back = SkeletonGraph::from_json(&g.to_json()).unwrap();
        assert_eq!(g, back);
    }
}

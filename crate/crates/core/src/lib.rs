//! Gauss-Seidel graph filtering and the GS-Net family of graph layers for
//! lifting 2D skeleton keypoints to 3D poses.
//!
//! The crate is organised bottom-up:
//!
//! - [`graph`]: skeleton topologies, (normalized) adjacency, Laplacian and the
//!   diagonal/triangular splitting used by the solvers and layers.
//! - [`filter`]: Laplacian-regularized graph filtering solved directly, by
//!   exact Gauss-Seidel sweeps, or with the first-order Neumann approximation.
//! - [`net`]: the GS-Net layer, residual blocks, non-local block, refinement
//!   head, loss, hand-written backward pass, AMSGrad and the training loop.
//! - [`metrics`]: MPJPE, Procrustes alignment, PA-MPJPE, PCK and AUC.
//! - [`data`]: dataset files, preprocessing and synthetic pose generation.

pub mod data;
pub mod error;
pub mod filter;
pub mod graph;
pub mod linalg;
pub mod metrics;
pub mod net;

pub use error::{Error, Result};

/// Dense real matrix used throughout the crate.
pub type Mat = nalgebra::DMatrix<f64>;

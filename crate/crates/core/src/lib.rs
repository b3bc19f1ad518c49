//! Point-cloud place recognition and relocalization toolkit.
//!
//! The pipeline assigns each LiDAR point a ground probability from patch-wise
//! plane statistics, samples keypoints with handcrafted rotation-invariant
//! descriptors, solves an entropy-regularized unbalanced optimal transport
//! problem for soft correspondence, weakens ground-dominated and
//! geometrically implausible pairs through a weight matrix, and recovers the
//! 6-DoF relative pose with weighted SVD inside a RANSAC loop. Global place
//! retrieval aggregates the local descriptors into VLAD vectors, and the
//! evaluation module scores loop detection (AP, max F1, recall@k) and
//! registration (success rate, RME, TME) the way the sequence benchmarks
//! expect.
//!
//! See the `cli` module (and the `loopmatch` binary) for batch entry points,
//! and `synth` for the deterministic scene generator used by the test suite.

pub mod cli;
pub mod config;
pub mod correspondence;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod geometry;
pub mod global_desc;
pub mod ground;
pub mod io;
pub mod registration;
pub mod synth;

#[cfg(test)]
pub(crate) mod test_util;

pub use error::{Error, Result};
pub use geometry::{PointCloud, RigidTransform, SequenceMeta};

//! Refinement of noisy per-frame 3D vehicle poses into pseudo-labels.
//!
//! Each observation is pulled toward its lidar evidence by a Chamfer loss
//! over a PCA-decoded car shape, and toward a temporally consistent target
//! derived from its tracklet: the median world position for parked cars, a
//! piecewise-linear RANSAC trajectory for moving ones.

pub mod chamfer;
pub mod eval;
pub mod exec;
pub mod geometry;
pub mod kdtree;
pub mod motion;
pub mod pipeline;
pub mod refine;
pub mod scenario;
pub mod shapespace;
pub mod tracker;

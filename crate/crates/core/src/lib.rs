//! Dense optical flow, depth completion and surface-velocity estimation for a
//! static camera-LiDAR rig observing a flowing surface.
//!
//! Flow and depth fields of each frame pair are obtained by coarse-to-fine
//! minimization of a self-supervised energy (photometric SSIM, edge-aware
//! smoothness, sparse LiDAR supervision, static-scene and forward-backward
//! consistency terms). Per-pair results are temporally smoothed, lifted to 3D
//! and reduced to flow-speed profiles.

pub mod corr;
pub mod energy;
pub mod error;
pub mod geom;
pub mod io;
pub mod kinematics;
pub mod metrics;
pub mod raster;
pub mod solver;
pub mod synth;

pub use error::{Error, Result};

//! Dual-camera 3D human pose estimation for walker-assisted gait.

pub mod filter;
pub mod geometry;
pub mod heatmap;
pub mod lifter;
pub mod metrics;
pub mod preprocess;
pub mod runtime;
pub mod skeleton;
pub mod synthgait;

pub use geometry::{CameraId, CameraIntrinsics, CameraRig, RigidTransform, Vec2, Vec3};
pub use skeleton::{Skeleton2D, Skeleton3D, Topology, NUM_KEYPOINTS};

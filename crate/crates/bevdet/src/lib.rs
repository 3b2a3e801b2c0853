//! End-to-end bird's-eye-view LiDAR object detection on the CPU.
//!
//! The pipeline turns raw LiDAR sweeps into oriented 3D boxes:
//!
//! 1. [`lidar`] reads KITTI-style point clouds, labels and calibration, or
//!    generates seeded synthetic scenes, and applies point-cloud augmentation.
//! 2. [`bev`] rasterizes a cloud into a 3-channel bird's-eye-view image
//!    (height, occupancy, intensity) with exact pixel/world transforms.
//! 3. [`targets`] converts object labels into per-pixel training targets:
//!    keypoint class, log-dimension regression and binned orientation.
//! 4. [`nn`] is a minimal dense 4-axis tensor library with hand-written
//!    forward and backward passes for every layer the model needs.
//! 5. [`model`] assembles the hybrid deep-layer-aggregation backbone with
//!    context aggregation gating and three prediction heads.
//! 6. [`loss`] implements the weighted total loss and its ablation variants.
//! 7. [`decode`] post-processes head outputs into oriented detections.
//! 8. [`eval`] scores detections with rotated-box IoU and average precision.
//! 9. [`train`] provides Adam and a deterministic training loop.
//! 10. [`bench`] measures per-stage latency and runtime determinism.

pub mod bev;
pub mod decode;
pub mod error;
pub mod lidar;
pub mod loss;
pub mod model;
pub mod nn;
pub mod targets;

pub use error::{Error, Result};

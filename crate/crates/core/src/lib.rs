//! Differentiable Gaussian-splatting renderer with joint camera and geometry
//! fitting from images.
//!
//! The crate is organized bottom-up:
//!
//! * [`geometry`]: frames, quaternions, the pinhole camera, spherical
//!   coordinates and EWA projection;
//! * [`render`]: forward rasterization with replayable per-pixel buffers;
//! * [`grad`]: the analytic backward pass and its finite-difference oracle;
//! * [`loss`]: image losses, camera and regularization losses, and the
//!   point-cloud evaluation metrics;
//! * [`train`]: the optimizer, schedules, view sampling, gradient filtering
//!   and the fitting loops;
//! * [`synth`]: orbit cameras, synthetic clouds and dataset I/O.

pub mod error;
pub mod geometry;
pub mod grad;
pub mod image;
pub mod loss;
pub mod params;
pub mod render;
pub mod sh;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use geometry::{
    cartesian_to_spherical, compute_bbox, project_gaussian, quat_to_rotmat, spherical_to_cartesian,
    BBox3, Camera, CameraExtrinsics, CameraIntrinsics, Quaternion, Spherical, Vec3,
};
pub use grad::{backward_render, finite_diff_grad, gradcheck, GradientSet, ImageLoss};
pub use image::Image;
pub use render::{rasterize, Gaussian, GaussianCloud, RenderOptions, RenderOutput};

//! Depth maps and extra-dense point clouds from 4D light fields.
//!
//! The pipeline treats one row (or column) of the matrix of views as a
//! short video and runs an angularly consistent optical flow over it:
//! coarse-to-fine patch matching seeds sparse correspondences, an
//! edge-aware volumetric filter densifies them and aligns the per-pair
//! disparity estimates, and a median + one-step variational fusion turns
//! the stack into a single disparity map, a metric depth map, and
//! optionally a fused multi-view point cloud.

pub mod config;
pub mod cpm;
pub mod descriptor;
pub mod error;
pub mod eval;
pub mod flowfilter;
pub mod fusion;
pub mod image;
pub mod lightfield;
pub mod maps;
pub mod pfm;
pub mod pointcloud;
pub mod volume;

pub use error::{Error, Result};
pub use image::Image;
pub use lightfield::{load_hci, Calibration, LightField, LoadOptions};
pub use maps::{depth_to_disparity, disparity_to_depth, DepthMap, DisparityMap, Grid};
pub use volume::{extract_volume, Axis, SpatioAngularVolume};

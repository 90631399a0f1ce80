//! Densification of semi-dense monocular SLAM reconstructions using
//! multispectral photometric stereo.
//!
//! A keyframe arrives as a multispectral image (one RGB frame captured under
//! three colored directional lights), a semi-dense inverse depth map and a
//! Sim(3) pose. The pipeline restores metric depth, fills holes, estimates a
//! per-segment mixing matrix from depth-gradient prior normals, recovers a
//! dense normal map, fuses it with the semi-dense cloud by a two-stage
//! position/normal optimization, and registers per-keyframe clouds into a
//! global model with trimmed ICP. A synthetic Lambertian renderer provides
//! exact ground truth for all of it.

pub mod cloud;
pub mod fusion;
pub mod geometry;
pub mod icp;
pub mod image;
pub mod ingest;
pub mod io;
pub mod kdtree;
pub mod mps;
pub mod pipeline;
pub mod synth;

pub use cloud::{CloudPoint, PointCloud};
pub use geometry::{quat_to_rotation, CameraIntrinsics, CameraPose, GeometryError};
pub use image::{DepthMap, InverseDepthMap, MultispectralImage, NormalMap, PixelMask};

pub use nalgebra;

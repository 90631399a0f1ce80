//! Shared fixtures for the stage benchmarks.

use chromafuse_core::geometry::CameraIntrinsics;
use chromafuse_core::nalgebra::Vector3;
use chromafuse_core::synth::{
    generate_trajectory, render_multispectral, AlbedoLayout, LightRig, RenderOutput, SceneSpec,
};

pub fn intrinsics(size: usize) -> CameraIntrinsics {
    CameraIntrinsics::new(
        1.25 * size as f64,
        1.25 * size as f64,
        size as f64 / 2.0,
        size as f64 / 2.0,
        size,
        size,
    )
    .expect("valid intrinsics")
}

/// Uniform-albedo sphere rendered from the default orbit pose.
pub fn sphere_render(size: usize) -> RenderOutput {
    let scene = SceneSpec::sphere(1.0, AlbedoLayout::Uniform(Vector3::new(0.9, 0.9, 0.9)));
    let pose = generate_trajectory(1, 5.0, Vector3::zeros())[0];
    render_multispectral(&scene, &LightRig::default_rig(), &intrinsics(size), &pose)
}

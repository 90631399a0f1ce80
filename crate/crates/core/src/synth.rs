//! Synthetic ground-truth generator: Lambertian scenes rendered under a
//! camera-fixed rig of three colored directional lights, with SLAM-like
//! semi-dense inverse depth maps derived from the renders.

use crate::geometry::{CameraIntrinsics, CameraPose};
use crate::image::{DepthMap, InverseDepthMap, MultispectralImage, NormalMap, PixelMask};
use crate::io::bundle as bundle_io;
use crate::io::IoError;
use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use std::path::Path;

/// Analytic scene geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Sphere { center: Vector3<f64>, radius: f64 },
    Plane { point: Vector3<f64>, normal: Vector3<f64> },
    /// Relief surface z = amplitude * sin(frequency x) * sin(frequency y)
    /// in world coordinates, facing the default camera.
    Heightfield { amplitude: f64, frequency: f64 },
}

/// Chromatic albedo layout over the shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlbedoLayout {
    Uniform(Vector3<f64>),
    /// Two albedos split by world x relative to the shape center.
    SplitX {
        left: Vector3<f64>,
        right: Vector3<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub shape: Shape,
    pub albedo: AlbedoLayout,
}

impl SceneSpec {
    pub fn sphere(radius: f64, albedo: AlbedoLayout) -> Self {
        assert!(radius > 0.0);
        Self {
            shape: Shape::Sphere {
                center: Vector3::zeros(),
                radius,
            },
            albedo,
        }
    }

    fn split_x(&self) -> f64 {
        match self.shape {
            Shape::Sphere { center, .. } => center.x,
            Shape::Plane { point, .. } => point.x,
            Shape::Heightfield { .. } => 0.0,
        }
    }

    /// Region index (0 or 1) of a world-frame surface point.
    pub fn region_of(&self, p_world: &Vector3<f64>) -> usize {
        match self.albedo {
            AlbedoLayout::Uniform(_) => 0,
            AlbedoLayout::SplitX { .. } => {
                if p_world.x < self.split_x() {
                    0
                } else {
                    1
                }
            }
        }
    }

    pub fn region_albedo(&self, region: usize) -> Vector3<f64> {
        match self.albedo {
            AlbedoLayout::Uniform(a) => a,
            AlbedoLayout::SplitX { left, right } => {
                if region == 0 {
                    left
                } else {
                    right
                }
            }
        }
    }

    pub fn region_count(&self) -> usize {
        match self.albedo {
            AlbedoLayout::Uniform(_) => 1,
            AlbedoLayout::SplitX { .. } => 2,
        }
    }
}

/// One directional light, camera-fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Light {
    /// Unit direction the light travels, i.e. pointing toward the surface,
    /// expressed in the camera frame.
    pub direction: Vector3<f64>,
    /// Emission per sensor channel.
    pub intensity: Vector3<f64>,
}

/// Three colored directional lights rigidly attached to the camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LightRig {
    pub lights: [Light; 3],
}

impl LightRig {
    /// Three lights tilted 45 degrees off the optical axis at azimuths
    /// 0/120/240 degrees, each emitting in exactly one channel.
    pub fn default_rig() -> Self {
        let tilt = std::f64::consts::FRAC_PI_4;
        let mut lights = [Light {
            direction: Vector3::zeros(),
            intensity: Vector3::zeros(),
        }; 3];
        for (j, light) in lights.iter_mut().enumerate() {
            let azimuth = 2.0 * std::f64::consts::PI * j as f64 / 3.0;
            light.direction = Vector3::new(
                tilt.sin() * azimuth.cos(),
                tilt.sin() * azimuth.sin(),
                tilt.cos(),
            );
            light.intensity[j] = 1.0;
        }
        Self { lights }
    }

    /// The matrix W with `c = diag(albedo) * W * n` for unclamped pixels:
    /// row i collects sum_j E_j[i] * (-l_j)^T.
    pub fn response_matrix(&self) -> Matrix3<f64> {
        let mut w = Matrix3::zeros();
        for light in &self.lights {
            for i in 0..3 {
                let row = -light.intensity[i] * light.direction;
                for k in 0..3 {
                    w[(i, k)] += row[k];
                }
            }
        }
        w
    }

    /// Exact mixing matrix for a region albedo: `c = M * n` wherever no
    /// shading clamp is active.
    pub fn mixing_matrix(&self, albedo: &Vector3<f64>) -> Matrix3<f64> {
        Matrix3::from_diagonal(albedo) * self.response_matrix()
    }
}

/// Output of one rendered view. Depth and normals are exact, in the camera
/// frame; `clamped` marks hit pixels where at least one light's shading
/// clamp activated (attached shadow), where the image stops being a linear
/// function of the normal.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub image: MultispectralImage,
    pub depth: DepthMap,
    pub normals: NormalMap,
    pub clamped: PixelMask,
}

fn intersect_sphere(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    center: &Vector3<f64>,
    radius: f64,
) -> Option<f64> {
    let oc = origin - center;
    let b = oc.dot(dir);
    let c = oc.norm_squared() - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let t = -b - disc.sqrt();
    (t > 1e-9).then_some(t)
}

fn intersect_plane(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    point: &Vector3<f64>,
    normal: &Vector3<f64>,
) -> Option<f64> {
    let denom = dir.dot(normal);
    if denom.abs() < 1e-12 {
        return None;
    }
    let t = (point - origin).dot(normal) / denom;
    (t > 1e-9).then_some(t)
}

fn heightfield_value(amplitude: f64, frequency: f64, x: f64, y: f64) -> f64 {
    amplitude * (frequency * x).sin() * (frequency * y).sin()
}

fn intersect_heightfield(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    amplitude: f64,
    frequency: f64,
    t_max: f64,
) -> Option<f64> {
    // Ray march with bisection refinement on the first sign change of
    // g(t) = p_z(t) - h(p_x, p_y).
    let steps = 1024;
    let dt = t_max / steps as f64;
    let g = |t: f64| {
        let p = origin + dir * t;
        p.z - heightfield_value(amplitude, frequency, p.x, p.y)
    };
    let mut t_prev = 1e-9;
    let mut g_prev = g(t_prev);
    for i in 1..=steps {
        let t = dt * i as f64;
        let g_cur = g(t);
        if g_prev > 0.0 && g_cur <= 0.0 {
            let (mut lo, mut hi) = (t_prev, t);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if g(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return Some(0.5 * (lo + hi));
        }
        t_prev = t;
        g_prev = g_cur;
    }
    None
}

struct Hit {
    point_world: Vector3<f64>,
    normal_world: Vector3<f64>,
}

fn cast_ray(shape: &Shape, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
    match *shape {
        Shape::Sphere { center, radius } => {
            let t = intersect_sphere(origin, dir, &center, radius)?;
            let p = origin + dir * t;
            Some(Hit {
                point_world: p,
                normal_world: (p - center) / radius,
            })
        }
        Shape::Plane { point, normal } => {
            let n = normal.normalize();
            let t = intersect_plane(origin, dir, &point, &n)?;
            Some(Hit {
                point_world: origin + dir * t,
                normal_world: n,
            })
        }
        Shape::Heightfield {
            amplitude,
            frequency,
        } => {
            let t_max = 4.0 * origin.norm().max(1.0);
            let t = intersect_heightfield(origin, dir, amplitude, frequency, t_max)?;
            let p = origin + dir * t;
            let dhdx = amplitude
                * frequency
                * (frequency * p.x).cos()
                * (frequency * p.y).sin();
            let dhdy = amplitude
                * frequency
                * (frequency * p.x).sin()
                * (frequency * p.y).cos();
            Some(Hit {
                point_world: p,
                normal_world: Vector3::new(-dhdx, -dhdy, 1.0).normalize(),
            })
        }
    }
}

/// Renders one view: per-pixel radiance, exact depth and exact camera-frame
/// normals. Shading per channel is
/// `albedo_i * sum_j E_j[i] * max(0, -l_j . n)` with the light directions
/// carried along with the camera.
pub fn render_multispectral(
    scene: &SceneSpec,
    rig: &LightRig,
    intr: &CameraIntrinsics,
    pose: &CameraPose,
) -> RenderOutput {
    let (w, h) = (intr.width, intr.height);
    let origin = pose.apply(Vector3::zeros());
    let rot = pose.rotation();
    let inv = pose.inverse();

    let rows: Vec<Vec<Option<(Vector3<f64>, f64, Vector3<f64>, bool)>>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let dir_cam = Vector3::new(
                        (x as f64 - intr.cx) / intr.fx,
                        (y as f64 - intr.cy) / intr.fy,
                        1.0,
                    )
                    .normalize();
                    let dir_world = (rot * dir_cam).normalize();
                    let hit = cast_ray(&scene.shape, &origin, &dir_world)?;
                    let p_cam = inv.apply(hit.point_world);
                    if p_cam.z <= 0.0 {
                        return None;
                    }
                    let mut n_cam = inv.rotate(hit.normal_world);
                    if n_cam.dot(&p_cam) > 0.0 {
                        n_cam = -n_cam;
                    }
                    let region = scene.region_of(&hit.point_world);
                    let albedo = scene.region_albedo(region);
                    let mut c = Vector3::zeros();
                    let mut clamped = false;
                    for light in &rig.lights {
                        let lambert = -light.direction.dot(&n_cam);
                        if lambert <= 0.0 {
                            clamped = true;
                            continue;
                        }
                        for i in 0..3 {
                            c[i] += albedo[i] * light.intensity[i] * lambert;
                        }
                    }
                    Some((c, p_cam.z, n_cam, clamped))
                })
                .collect()
        })
        .collect();

    let mut image = MultispectralImage::zeros(w, h);
    let mut depth = DepthMap::invalid(w, h);
    let mut normals = NormalMap::invalid(w, h);
    let mut clamped = PixelMask::new(w, h, false);
    for (y, row) in rows.iter().enumerate() {
        for (x, px) in row.iter().enumerate() {
            if let Some((c, z, n, cl)) = px {
                image.set(x, y, *c);
                depth.set(x, y, *z);
                normals.set(x, y, *n);
                clamped.set(x, y, *cl);
            }
        }
    }
    RenderOutput {
        image,
        depth,
        normals,
        clamped,
    }
}

/// Gradient magnitude of the mean-channel luminance, central differences.
fn luminance_gradient(img: &MultispectralImage) -> Vec<f64> {
    let (w, h) = (img.width, img.height);
    let lum = |x: usize, y: usize| img.get(x, y).sum() / 3.0;
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let gx = match x {
                0 => lum(1, y) - lum(0, y),
                x if x == w - 1 => lum(x, y) - lum(x - 1, y),
                _ => 0.5 * (lum(x + 1, y) - lum(x - 1, y)),
            };
            let gy = match y {
                0 => lum(x, 1) - lum(x, 0),
                y if y == h - 1 => lum(x, y) - lum(x, y - 1),
                _ => 0.5 * (lum(x, y + 1) - lum(x, y - 1)),
            };
            out[y * w + x] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Mimics the SLAM-side semi-dense map: inverse depth (with seeded Gaussian
/// noise) at pixels whose image gradient magnitude reaches the threshold,
/// missing everywhere else.
pub fn make_semidense(
    depth_gt: &DepthMap,
    img: &MultispectralImage,
    grad_threshold: f64,
    noise_sigma: f64,
    seed: u64,
) -> InverseDepthMap {
    assert!(grad_threshold >= 0.0 && noise_sigma >= 0.0);
    let (w, h) = (depth_gt.width, depth_gt.height);
    let grad = luminance_gradient(img);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = InverseDepthMap::missing(w, h);
    for y in 0..h {
        for x in 0..w {
            if let Some(d) = depth_gt.get(x, y) {
                if grad[y * w + x] >= grad_threshold {
                    let noise = if noise_sigma > 0.0 {
                        noise_sigma * normal.sample(&mut rng)
                    } else {
                        0.0
                    };
                    out.set(x, y, Some(1.0 / d + noise));
                }
            }
        }
    }
    out
}

/// Rescales an inverse depth map so its valid values have mean one, the way
/// the tracker normalizes keyframes. Returns the normalized map and the
/// scene scale factor that restores metric depths (`depth_metric =
/// depth_normalized * scale`).
pub fn normalize_inverse_depth(idmap: &InverseDepthMap) -> (InverseDepthMap, f64) {
    let (sum, count) = idmap
        .values()
        .iter()
        .flatten()
        .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 || sum <= 0.0 {
        return (idmap.clone(), 1.0);
    }
    let mean = sum / count as f64;
    let mut out = InverseDepthMap::missing(idmap.width, idmap.height);
    for y in 0..idmap.height {
        for x in 0..idmap.width {
            out.set(x, y, idmap.get(x, y).map(|v| v / mean));
        }
    }
    // Normalized depth = mean * metric depth, so metric = normalized / mean.
    (out, 1.0 / mean)
}

/// Camera-to-world poses on a circular orbit in the world xz-plane, looking
/// at the target, unit scale, equal angular steps. n = 1 yields a single
/// pose on the +z side looking down -z.
pub fn generate_trajectory(n: usize, orbit_radius: f64, target: Vector3<f64>) -> Vec<CameraPose> {
    assert!(n >= 1 && orbit_radius > 0.0);
    (0..n)
        .map(|k| {
            let angle = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            let position = target + orbit_radius * Vector3::new(angle.sin(), 0.0, angle.cos());
            let forward = (target - position).normalize();
            let world_up = Vector3::new(0.0, 1.0, 0.0);
            let right = forward.cross(&world_up).normalize();
            let down = forward.cross(&right);
            let rot = Matrix3::from_columns(&[right, down, forward]);
            CameraPose::from_parts(
                UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(rot)),
                position,
                1.0,
            )
        })
        .collect()
}

/// Default gradient threshold for [`make_semidense`], tuned so a default
/// sphere keeps roughly a tenth of its surface pixels.
pub const DEFAULT_GRAD_THRESHOLD: f64 = 0.008;
/// Default inverse-depth noise, relative to the mean valid inverse depth.
pub const DEFAULT_NOISE_REL_SIGMA: f64 = 0.01;

/// Everything needed to generate a keyframe bundle with ground truth.
#[derive(Debug, Clone)]
pub struct BundleSpec {
    pub scene: SceneSpec,
    pub rig: LightRig,
    pub intrinsics: CameraIntrinsics,
    pub keyframes: usize,
    pub orbit_radius: f64,
    pub target: Vector3<f64>,
    pub grad_threshold: f64,
    /// Inverse-depth noise sigma as a fraction of the mean valid inverse
    /// depth of each keyframe.
    pub noise_rel_sigma: f64,
    pub seed: u64,
}

impl BundleSpec {
    /// Uniform-albedo sphere on the default orbit, default rig.
    pub fn default_sphere() -> Self {
        Self {
            scene: SceneSpec::sphere(1.0, AlbedoLayout::Uniform(Vector3::new(0.9, 0.9, 0.9))),
            rig: LightRig::default_rig(),
            intrinsics: CameraIntrinsics::new(640.0, 640.0, 256.0, 256.0, 512, 512)
                .expect("valid default intrinsics"),
            keyframes: 1,
            orbit_radius: 5.0,
            target: Vector3::zeros(),
            grad_threshold: DEFAULT_GRAD_THRESHOLD,
            noise_rel_sigma: DEFAULT_NOISE_REL_SIGMA,
            seed: 0,
        }
    }
}

/// Per-keyframe generation summary.
#[derive(Debug, Clone)]
pub struct GeneratedKeyframe {
    pub id: u32,
    pub semidense_count: usize,
    pub semidense_fraction: f64,
    pub scale: f64,
}

/// Renders the trajectory and writes a complete keyframe bundle plus ground
/// truth under `dir`. Inverse depth maps are normalized to mean one with
/// the restoring scale stored in poses.txt, mirroring the tracker contract.
pub fn generate_bundle(spec: &BundleSpec, dir: &Path) -> Result<Vec<GeneratedKeyframe>, IoError> {
    std::fs::create_dir_all(dir.join("gt"))?;
    let poses = generate_trajectory(spec.keyframes, spec.orbit_radius, spec.target);

    let renders: Vec<RenderOutput> = poses
        .iter()
        .map(|pose| render_multispectral(&spec.scene, &spec.rig, &spec.intrinsics, pose))
        .collect();

    // One quantization scale for the whole bundle.
    let max_radiance = renders
        .iter()
        .map(|r| r.image.max_channel())
        .fold(0.0, f64::max);
    let image_scale = if max_radiance > 0.0 {
        255.0 / max_radiance
    } else {
        255.0
    };

    let mut records = Vec::new();
    let mut stats = Vec::new();
    let mut generated = Vec::new();
    for (k, (pose, render)) in poses.iter().zip(&renders).enumerate() {
        let id = k as u32;
        let valid_gt = render.depth.valid_count();
        let mean_inv = if valid_gt > 0 {
            render
                .depth
                .depths()
                .iter()
                .zip(render.depth.validity())
                .filter(|(_, &v)| v)
                .map(|(&d, _)| 1.0 / d)
                .sum::<f64>()
                / valid_gt as f64
        } else {
            1.0
        };
        let sigma_abs = spec.noise_rel_sigma * mean_inv;
        let semidense = make_semidense(
            &render.depth,
            &render.image,
            spec.grad_threshold,
            sigma_abs,
            spec.seed.wrapping_add(id as u64),
        );
        let (normalized, scale) = normalize_inverse_depth(&semidense);
        let count = normalized.present_count();

        bundle_io::write_image_png(&bundle_io::image_path(dir, id), &render.image, image_scale)?;
        bundle_io::write_invdepth(&bundle_io::invdepth_path(dir, id), &normalized)?;
        bundle_io::write_depth(&bundle_io::gt_depth_path(dir, id), &render.depth)?;
        bundle_io::write_normals(&bundle_io::gt_normals_path(dir, id), &render.normals)?;

        let pose_with_scale = CameraPose::from_parts(pose.rotation(), pose.translation(), scale);
        records.push(bundle_io::PoseRecord {
            id,
            pose: pose_with_scale,
        });
        let fraction = if valid_gt > 0 {
            count as f64 / valid_gt as f64
        } else {
            0.0
        };
        stats.push(bundle_io::KeyframeStats {
            id,
            semidense_count: count,
            semidense_fraction: fraction,
        });
        generated.push(GeneratedKeyframe {
            id,
            semidense_count: count,
            semidense_fraction: fraction,
            scale,
        });
    }

    bundle_io::write_intrinsics(dir, &spec.intrinsics)?;
    bundle_io::write_poses(dir, &records)?;
    bundle_io::write_meta(
        dir,
        &bundle_io::BundleMeta {
            image_scale,
            keyframes: stats,
        },
    )?;

    let regions: Vec<bundle_io::MixingRegion> = (0..spec.scene.region_count())
        .map(|region| {
            let m = spec.rig.mixing_matrix(&spec.scene.region_albedo(region));
            bundle_io::MixingRegion {
                region,
                m: [
                    [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
                    [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
                    [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
                ],
            }
        })
        .collect();
    bundle_io::write_mixing_gt(dir, &bundle_io::MixingGroundTruth { regions })?;

    Ok(generated)
}

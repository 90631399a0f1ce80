//! Fusion of the semi-dense cloud with the dense normal map: view
//! conversion, normal association, densification over the keyframe grid,
//! low-frequency normal bias correction and the position/normal joint
//! optimization.

use crate::cloud::{CloudPoint, PointCloud};
use crate::geometry::{CameraIntrinsics, CameraPose};
use crate::image::{DepthMap, NormalMap};
use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("both the cloud and the depth map are empty")]
    EmptyInput,
    #[error("solver reached {iterations} iterations with relative residual {residual:.3e} > {tolerance:.3e}")]
    SolverDiverged {
        iterations: usize,
        residual: f64,
        tolerance: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    /// Weight on the position (measurement) term.
    pub weight_position: f64,
    /// Weight on the normal (tangent) term.
    pub weight_normal: f64,
    /// Boxcar radius in pixels for the low-frequency split.
    pub smoothing_radius: usize,
    /// Relative residual the sparse solver must reach.
    pub solver_tolerance: f64,
    pub max_iterations: usize,
    /// A cloud point may claim a pixel only when its depth agrees with the
    /// hole-filled depth map within this relative tolerance; keeps occluded
    /// points (e.g. the far side of a closed surface seen from another
    /// keyframe) from sampling the grid.
    pub sample_depth_tolerance: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            weight_position: 1.0,
            weight_normal: 3.0,
            smoothing_radius: 7,
            solver_tolerance: 1e-8,
            max_iterations: 2000,
            sample_depth_tolerance: 0.05,
        }
    }
}

/// Where a fused pixel's position measurement came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// A semi-dense cloud point projected onto this pixel.
    Sampled,
    /// Position backprojected from the hole-filled depth map.
    Densified,
}

/// Per-pixel grid over a keyframe holding measured positions and normals.
#[derive(Debug, Clone)]
pub struct FusedSurface {
    pub width: usize,
    pub height: usize,
    position: Vec<Vector3<f64>>,
    measured_normal: Vec<Vector3<f64>>,
    corrected_normal: Vec<Vector3<f64>>,
    valid: Vec<bool>,
    provenance: Vec<Provenance>,
}

impl FusedSurface {
    fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            position: vec![Vector3::zeros(); width * height],
            measured_normal: vec![Vector3::zeros(); width * height],
            corrected_normal: vec![Vector3::zeros(); width * height],
            valid: vec![false; width * height],
            provenance: vec![Provenance::Densified; width * height],
        }
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    #[inline]
    pub fn position(&self, x: usize, y: usize) -> Vector3<f64> {
        self.position[y * self.width + x]
    }

    #[inline]
    pub fn measured_normal(&self, x: usize, y: usize) -> Vector3<f64> {
        self.measured_normal[y * self.width + x]
    }

    #[inline]
    pub fn corrected_normal(&self, x: usize, y: usize) -> Vector3<f64> {
        self.corrected_normal[y * self.width + x]
    }

    #[inline]
    pub fn provenance(&self, x: usize, y: usize) -> Provenance {
        self.provenance[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn sampled_count(&self) -> usize {
        self.valid
            .iter()
            .zip(&self.provenance)
            .filter(|(&v, &p)| v && p == Provenance::Sampled)
            .count()
    }

    pub fn densified_count(&self) -> usize {
        self.valid
            .iter()
            .zip(&self.provenance)
            .filter(|(&v, &p)| v && p == Provenance::Densified)
            .count()
    }

    /// Valid pixels in row-major order; the point order every consumer of
    /// [`joint_optimize`] relies on.
    pub fn valid_pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.valid
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(move |(i, _)| (i % w, i / w))
    }
}

/// Maps a world-frame cloud into the keyframe camera frame: positions via
/// the inverse pose, normals via the inverse rotation.
pub fn transform_cloud_to_keyframe(cloud: &PointCloud, pose: &CameraPose) -> PointCloud {
    let inv = pose.inverse();
    let mut out = PointCloud::with_capacity(cloud.len());
    for p in &cloud.points {
        let mut q = *p;
        q.position = inv.apply(p.position);
        q.normal = p.normal.map(|n| inv.rotate(n));
        out.push(q);
    }
    out
}

/// Attaches the normal of the pixel each camera-frame point projects onto
/// (nearest-pixel sampling). Points outside the frustum or hitting invalid
/// normal pixels carry no normal afterwards. Positions are untouched.
pub fn associate_normals(
    cloud_cam: &PointCloud,
    normals: &NormalMap,
    intr: &CameraIntrinsics,
) -> PointCloud {
    let mut out = cloud_cam.clone();
    for p in &mut out.points {
        p.normal = intr
            .project_to_pixel(&p.position)
            .and_then(|(x, y)| normals.get(x, y));
    }
    out
}

/// Builds the fused per-pixel grid: pixels hit by a semi-dense point take
/// that point's position (smallest reprojection residual wins collisions,
/// then lowest point index); remaining valid-normal pixels take the
/// backprojected hole-filled depth. Valid pixels are exactly those carrying
/// both a position and a measured normal. Cloud points whose depth
/// contradicts the depth map (occluded surfaces from other views) never
/// claim a pixel.
pub fn densify(
    cloud_cam: &PointCloud,
    dense_depth: &DepthMap,
    normals: &NormalMap,
    intr: &CameraIntrinsics,
    cfg: &FusionConfig,
) -> Result<FusedSurface, FusionError> {
    if cloud_cam.is_empty() && dense_depth.valid_count() == 0 {
        return Err(FusionError::EmptyInput);
    }
    let (w, h) = (normals.width, normals.height);
    let mut surface = FusedSurface::empty(w, h);

    // residual, point index per claimed pixel
    let mut claims: Vec<Option<(f64, usize)>> = vec![None; w * h];
    for (i, p) in cloud_cam.points.iter().enumerate() {
        let Some((u, v)) = intr.project(&p.position) else {
            continue;
        };
        let px = u.round();
        let py = v.round();
        if px < 0.0 || py < 0.0 || px >= w as f64 || py >= h as f64 {
            continue;
        }
        let (x, y) = (px as usize, py as usize);
        if let Some(d) = dense_depth.get(x, y) {
            if (p.position.z - d).abs() > cfg.sample_depth_tolerance * d {
                continue;
            }
        }
        let residual = ((u - px).powi(2) + (v - py).powi(2)).sqrt();
        let slot = &mut claims[y * w + x];
        let better = match slot {
            None => true,
            Some((r, j)) => residual < *r || (residual == *r && i < *j),
        };
        if better {
            *slot = Some((residual, i));
        }
    }

    for y in 0..h {
        for x in 0..w {
            let Some(n) = normals.get(x, y) else { continue };
            let i = y * w + x;
            if let Some((_, point_idx)) = claims[i] {
                surface.position[i] = cloud_cam.points[point_idx].position;
                surface.provenance[i] = Provenance::Sampled;
            } else if let Some(d) = dense_depth.get(x, y) {
                surface.position[i] = intr.unproject(x as f64, y as f64, d);
                surface.provenance[i] = Provenance::Densified;
            } else {
                continue;
            }
            surface.measured_normal[i] = n;
            surface.corrected_normal[i] = n;
            surface.valid[i] = true;
        }
    }
    Ok(surface)
}

/// Box-filtered sum of a masked vector field via summed-area tables.
struct Boxcar {
    width: usize,
    height: usize,
    sums: [Vec<f64>; 3],
    counts: Vec<f64>,
}

impl Boxcar {
    fn new(
        width: usize,
        height: usize,
        field: impl Fn(usize, usize) -> Option<Vector3<f64>>,
    ) -> Self {
        let stride = width + 1;
        let mut sums = [
            vec![0.0; stride * (height + 1)],
            vec![0.0; stride * (height + 1)],
            vec![0.0; stride * (height + 1)],
        ];
        let mut counts = vec![0.0; stride * (height + 1)];
        for y in 0..height {
            for x in 0..width {
                let (v, c) = field(x, y).map_or((Vector3::zeros(), 0.0), |v| (v, 1.0));
                for k in 0..3 {
                    sums[k][(y + 1) * stride + x + 1] = v[k]
                        + sums[k][y * stride + x + 1]
                        + sums[k][(y + 1) * stride + x]
                        - sums[k][y * stride + x];
                }
                counts[(y + 1) * stride + x + 1] = c
                    + counts[y * stride + x + 1]
                    + counts[(y + 1) * stride + x]
                    - counts[y * stride + x];
            }
        }
        Self {
            width,
            height,
            sums,
            counts,
        }
    }

    /// Mean of the field over the (2r+1)^2 window, None when no valid entry.
    fn mean(&self, x: usize, y: usize, r: usize) -> Option<Vector3<f64>> {
        let stride = self.width + 1;
        let x0 = x.saturating_sub(r);
        let y0 = y.saturating_sub(r);
        let x1 = (x + r + 1).min(self.width);
        let y1 = (y + r + 1).min(self.height);
        let rect = |t: &Vec<f64>| {
            t[y1 * stride + x1] - t[y0 * stride + x1] - t[y1 * stride + x0] + t[y0 * stride + x0]
        };
        let count = rect(&self.counts);
        if count <= 0.0 {
            return None;
        }
        Some(Vector3::new(
            rect(&self.sums[0]) / count,
            rect(&self.sums[1]) / count,
            rect(&self.sums[2]) / count,
        ))
    }
}

/// Rotation taking unit vector `from` onto unit vector `to`; None when they
/// are antiparallel (axis undefined).
fn rotation_between(from: &Vector3<f64>, to: &Vector3<f64>) -> Option<UnitQuaternion<f64>> {
    UnitQuaternion::rotation_between(from, to)
}

/// Corrects low-frequency bias in the measured normal field using the
/// measured positions: the smoothed position grid yields a position-derived
/// normal field; per pixel, the rotation aligning the smoothed measured
/// normal to the smoothed position normal is applied to the unsmoothed
/// measured normal. Degenerate pixels (no tangents, zero smoothed fields,
/// antiparallel alignment) are invalidated.
pub fn correct_normal_bias(surface: &FusedSurface, cfg: &FusionConfig) -> FusedSurface {
    let (w, h) = (surface.width, surface.height);
    let r = cfg.smoothing_radius.max(1);
    let mut out = surface.clone();
    if surface.valid_count() == 0 {
        return out;
    }

    let pos_box = Boxcar::new(w, h, |x, y| {
        surface.is_valid(x, y).then(|| surface.position(x, y))
    });
    let nrm_box = Boxcar::new(w, h, |x, y| {
        surface.is_valid(x, y).then(|| surface.measured_normal(x, y))
    });

    let smoothed_pos = |x: usize, y: usize| -> Option<Vector3<f64>> {
        surface.is_valid(x, y).then(|| pos_box.mean(x, y, r)).flatten()
    };

    for y in 0..h {
        for x in 0..w {
            if !surface.is_valid(x, y) {
                continue;
            }
            let i = y * w + x;

            // Tangents of the smoothed position grid, central where possible.
            let center = smoothed_pos(x, y);
            let tu = match (
                x.checked_sub(1).and_then(|xm| smoothed_pos(xm, y)),
                (x + 1 < w).then(|| smoothed_pos(x + 1, y)).flatten(),
            ) {
                (Some(a), Some(b)) => Some(b - a),
                (None, Some(b)) => center.map(|c| b - c),
                (Some(a), None) => center.map(|c| c - a),
                (None, None) => None,
            };
            let tv = match (
                y.checked_sub(1).and_then(|ym| smoothed_pos(x, ym)),
                (y + 1 < h).then(|| smoothed_pos(x, y + 1)).flatten(),
            ) {
                (Some(a), Some(b)) => Some(b - a),
                (None, Some(b)) => center.map(|c| b - c),
                (Some(a), None) => center.map(|c| c - a),
                (None, None) => None,
            };
            let (Some(tu), Some(tv)) = (tu, tv) else {
                out.valid[i] = false;
                continue;
            };
            let mut pos_normal = tu.cross(&tv);
            if pos_normal.norm() <= 1e-30 {
                out.valid[i] = false;
                continue;
            }
            pos_normal.normalize_mut();
            if pos_normal.dot(&surface.position(x, y)) > 0.0 {
                pos_normal = -pos_normal;
            }

            let Some(smoothed_meas) = nrm_box.mean(x, y, r).filter(|v| v.norm() > 1e-12) else {
                out.valid[i] = false;
                continue;
            };
            let smoothed_meas = smoothed_meas.normalize();
            let Some(align) = rotation_between(&smoothed_meas, &pos_normal) else {
                out.valid[i] = false;
                continue;
            };
            out.corrected_normal[i] = (align * surface.measured_normal(x, y)).normalize();
        }
    }
    out
}

/// Block-sparse symmetric positive-definite system for the joint solve.
struct NormalSystem {
    /// 3x3 diagonal block per unknown pixel.
    diag: Vec<Matrix3<f64>>,
    /// Off-diagonal blocks (neighbor unknown index, block) per row, CSR-ish.
    off: Vec<Vec<(usize, Matrix3<f64>)>>,
}

impl NormalSystem {
    fn mul(&self, x: &[Vector3<f64>], out: &mut [Vector3<f64>]) {
        out.par_iter_mut().enumerate().for_each(|(i, o)| {
            let mut acc = self.diag[i] * x[i];
            for (j, block) in &self.off[i] {
                acc += block * x[*j];
            }
            *o = acc;
        });
    }
}

fn dot(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u.dot(v)).sum()
}

/// Jointly optimizes surface positions against the measured positions and
/// the corrected normals:
/// minimize `wp * sum |p_i - p_i^meas|^2 + wn * sum_i sum_tangents ((p_j - p_i) . n_i)^2`
/// over the valid grid, with forward-difference tangents to the right and
/// down neighbors. Solved by block-Jacobi preconditioned conjugate
/// gradients started at the measured positions, so the objective can only
/// improve. Returns one point per valid pixel, row-major, carrying the
/// corrected normal.
pub fn joint_optimize(
    surface: &FusedSurface,
    cfg: &FusionConfig,
) -> Result<(PointCloud, usize), FusionError> {
    assert!(cfg.weight_position > 0.0 && cfg.weight_normal >= 0.0);
    let (w, h) = (surface.width, surface.height);
    let n_unknowns_grid: Vec<Option<usize>> = {
        let mut idx = vec![None; w * h];
        let mut next = 0usize;
        for i in 0..w * h {
            if surface.valid[i] {
                idx[i] = Some(next);
                next += 1;
            }
        }
        idx
    };
    let n = surface.valid_count();
    if n == 0 {
        return Err(FusionError::EmptyInput);
    }

    let pixels: Vec<(usize, usize)> = surface.valid_pixels().collect();
    let measured: Vec<Vector3<f64>> = pixels
        .iter()
        .map(|&(x, y)| surface.position(x, y))
        .collect();

    let wp = cfg.weight_position;
    let wn = cfg.weight_normal;

    let mut diag = vec![Matrix3::identity() * wp; n];
    let mut off: Vec<Vec<(usize, Matrix3<f64>)>> = vec![Vec::new(); n];
    for (row, &(x, y)) in pixels.iter().enumerate() {
        let nc = surface.corrected_normal(x, y);
        let outer = wn * nc * nc.transpose();
        for (nx, ny) in [(x + 1, y), (x, y + 1)] {
            if nx >= w || ny >= h || !surface.is_valid(nx, ny) {
                continue;
            }
            let col = n_unknowns_grid[ny * w + nx].unwrap();
            diag[row] += outer;
            diag[col] += outer;
            off[row].push((col, -outer));
            off[col].push((row, -outer));
        }
    }
    let system = NormalSystem { diag, off };

    // rhs = wp * measured (the normal term's target is zero).
    let b: Vec<Vector3<f64>> = measured.iter().map(|m| wp * m).collect();

    // Block-Jacobi preconditioner.
    let pre: Vec<Matrix3<f64>> = system
        .diag
        .iter()
        .map(|d| d.try_inverse().expect("diagonal blocks are SPD"))
        .collect();

    let mut x = measured.clone();
    let mut ax = vec![Vector3::zeros(); n];
    system.mul(&x, &mut ax);
    let mut residual: Vec<Vector3<f64>> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let b_norm = dot(&b, &b).sqrt().max(f64::MIN_POSITIVE);

    let mut z: Vec<Vector3<f64>> = residual
        .iter()
        .enumerate()
        .map(|(i, r)| pre[i] * r)
        .collect();
    let mut p = z.clone();
    let mut rz = dot(&residual, &z);
    let mut iterations = 0;

    for iter in 0..cfg.max_iterations {
        let rel = dot(&residual, &residual).sqrt() / b_norm;
        if rel <= cfg.solver_tolerance {
            break;
        }
        iterations = iter + 1;
        system.mul(&p, &mut ax);
        let pap = dot(&p, &ax);
        if pap <= 0.0 {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            residual[i] -= alpha * ax[i];
        }
        for i in 0..n {
            z[i] = pre[i] * residual[i];
        }
        let rz_new = dot(&residual, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }

    let final_rel = dot(&residual, &residual).sqrt() / b_norm;
    if final_rel > cfg.solver_tolerance {
        return Err(FusionError::SolverDiverged {
            iterations,
            residual: final_rel,
            tolerance: cfg.solver_tolerance,
        });
    }

    let mut cloud = PointCloud::with_capacity(n);
    for (i, &(px, py)) in pixels.iter().enumerate() {
        cloud.push(CloudPoint {
            position: x[i],
            normal: Some(surface.corrected_normal(px, py)),
            color: None,
            keyframe_id: None,
        });
    }
    Ok((cloud, iterations))
}

/// Value of the joint objective at explicit positions, used for the
/// never-worse-than-input check.
pub fn objective_value(surface: &FusedSurface, positions: &[Vector3<f64>], cfg: &FusionConfig) -> f64 {
    let pixels: Vec<(usize, usize)> = surface.valid_pixels().collect();
    assert_eq!(pixels.len(), positions.len());
    let (w, h) = (surface.width, surface.height);
    let index: std::collections::HashMap<(usize, usize), usize> = pixels
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| ((x, y), i))
        .collect();
    let mut total = 0.0;
    for (i, &(x, y)) in pixels.iter().enumerate() {
        total += cfg.weight_position * (positions[i] - surface.position(x, y)).norm_squared();
        let normal = surface.corrected_normal(x, y);
        for (nx, ny) in [(x + 1, y), (x, y + 1)] {
            if nx >= w || ny >= h || !surface.is_valid(nx, ny) {
                continue;
            }
            let j = index[&(nx, ny)];
            let t = (positions[j] - positions[i]).dot(&normal);
            total += cfg.weight_normal * t * t;
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CameraIntrinsics;

    fn intr(w: usize, h: usize) -> CameraIntrinsics {
        CameraIntrinsics::new(
            500.0,
            500.0,
            w as f64 / 2.0,
            h as f64 / 2.0,
            w,
            h,
        )
        .unwrap()
    }

    fn plane_surface(w: usize, h: usize, depth: f64) -> FusedSurface {
        let intr = intr(w, h);
        let mut d = DepthMap::invalid(w, h);
        let mut n = NormalMap::invalid(w, h);
        for y in 0..h {
            for x in 0..w {
                d.set(x, y, depth);
                n.set(x, y, Vector3::new(0.0, 0.0, -1.0));
            }
        }
        densify(&PointCloud::new(), &d, &n, &intr, &FusionConfig::default()).unwrap()
    }

    #[test]
    fn transform_cloud_round_trip() {
        let pose = CameraPose::new([0.8, 0.3, -0.2, 0.4], Vector3::new(1.0, -2.0, 0.5), 1.0)
            .unwrap();
        let mut cloud = PointCloud::new();
        cloud.push(
            CloudPoint::new(Vector3::new(0.5, 1.0, 4.0)).with_normal(Vector3::new(0.0, 0.0, -1.0)),
        );
        let cam = transform_cloud_to_keyframe(&cloud, &pose);
        let mut back = PointCloud::new();
        for p in &cam.points {
            let mut q = *p;
            q.position = pose.apply(p.position);
            q.normal = p.normal.map(|n| pose.rotate(n));
            back.push(q);
        }
        assert!((back.points[0].position - cloud.points[0].position).norm() < 1e-9);
        assert!((back.points[0].normal.unwrap() - cloud.points[0].normal.unwrap()).norm() < 1e-9);

        // Identity pose leaves the cloud unchanged; a pure translation
        // shifts positions by -t.
        let id = transform_cloud_to_keyframe(&cloud, &CameraPose::identity());
        assert_eq!(id.points[0].position, cloud.points[0].position);
        let t = CameraPose::new([1.0, 0.0, 0.0, 0.0], Vector3::new(1.0, 2.0, 3.0), 1.0).unwrap();
        let shifted = transform_cloud_to_keyframe(&cloud, &t);
        assert!(
            (shifted.points[0].position - (cloud.points[0].position - t.translation())).norm()
                < 1e-12
        );
    }

    #[test]
    fn associate_normals_by_projection() {
        let intr = intr(64, 64);
        let mut normals = NormalMap::invalid(64, 64);
        for y in 0..64 {
            for x in 0..64 {
                normals.set(x, y, Vector3::new(0.0, 0.0, -1.0));
            }
        }
        let mut cloud = PointCloud::new();
        cloud.push(CloudPoint::new(Vector3::new(0.0, 0.0, 3.0))); // principal ray
        cloud.push(CloudPoint::new(Vector3::new(0.0, 0.0, -1.0))); // behind camera
        cloud.push(CloudPoint::new(Vector3::new(10.0, 0.0, 1.0))); // outside frame
        let out = associate_normals(&cloud, &normals, &intr);
        assert_eq!(out.points[0].normal, Some(Vector3::new(0.0, 0.0, -1.0)));
        assert_eq!(out.points[1].normal, None);
        assert_eq!(out.points[2].normal, None);
        assert_eq!(out.points[0].position, cloud.points[0].position);
    }

    #[test]
    fn densify_counts() {
        let intr = intr(32, 32);
        let mut d = DepthMap::invalid(32, 32);
        let mut n = NormalMap::invalid(32, 32);
        for y in 0..32 {
            for x in 0..32 {
                d.set(x, y, 2.0);
                n.set(x, y, Vector3::new(0.0, 0.0, -1.0));
            }
        }
        // Empty cloud: everything densified.
        let s = densify(&PointCloud::new(), &d, &n, &intr, &FusionConfig::default()).unwrap();
        assert_eq!(s.valid_count(), 32 * 32);
        assert_eq!(s.densified_count(), 32 * 32);
        assert_eq!(s.sampled_count(), 0);

        // Cloud covering every pixel: zero densified.
        let mut cloud = PointCloud::new();
        for y in 0..32 {
            for x in 0..32 {
                cloud.push(CloudPoint::new(intr.unproject(x as f64, y as f64, 2.0)));
            }
        }
        let s = densify(&cloud, &d, &n, &intr, &FusionConfig::default()).unwrap();
        assert_eq!(s.sampled_count(), 32 * 32);
        assert_eq!(s.densified_count(), 0);

        // Half coverage: counts add up exactly.
        let mut half = PointCloud::new();
        for y in 0..32 {
            for x in 0..16 {
                half.push(CloudPoint::new(intr.unproject(x as f64, y as f64, 2.0)));
            }
        }
        let s = densify(&half, &d, &n, &intr, &FusionConfig::default()).unwrap();
        assert_eq!(s.sampled_count(), 16 * 32);
        assert_eq!(s.densified_count(), s.valid_count() - s.sampled_count());

        assert!(matches!(
            densify(
                &PointCloud::new(),
                &DepthMap::invalid(32, 32),
                &n,
                &intr,
                &FusionConfig::default()
            ),
            Err(FusionError::EmptyInput)
        ));
    }

    #[test]
    fn densify_rejects_depth_inconsistent_points() {
        let intr = intr(16, 16);
        let mut d = DepthMap::invalid(16, 16);
        let mut n = NormalMap::invalid(16, 16);
        for y in 0..16 {
            for x in 0..16 {
                d.set(x, y, 2.0);
                n.set(x, y, Vector3::new(0.0, 0.0, -1.0));
            }
        }
        let mut cloud = PointCloud::new();
        // Occluded point far behind the visible surface.
        cloud.push(CloudPoint::new(intr.unproject(8.0, 8.0, 3.0)));
        let s = densify(&cloud, &d, &n, &intr, &FusionConfig::default()).unwrap();
        assert_eq!(s.sampled_count(), 0);
        assert_eq!(s.provenance(8, 8), Provenance::Densified);
        // A point consistent with the depth map does claim its pixel.
        let mut cloud = PointCloud::new();
        cloud.push(CloudPoint::new(intr.unproject(8.0, 8.0, 2.02)));
        let s = densify(&cloud, &d, &n, &intr, &FusionConfig::default()).unwrap();
        assert_eq!(s.sampled_count(), 1);
    }

    #[test]
    fn densify_collision_prefers_smaller_residual() {
        let intr = intr(16, 16);
        let mut d = DepthMap::invalid(16, 16);
        let mut n = NormalMap::invalid(16, 16);
        for y in 0..16 {
            for x in 0..16 {
                d.set(x, y, 2.0);
                n.set(x, y, Vector3::new(0.0, 0.0, -1.0));
            }
        }
        let mut cloud = PointCloud::new();
        // Both project near pixel (8,8); the second is closer to center.
        cloud.push(CloudPoint::new(intr.unproject(8.4, 8.0, 2.0)));
        cloud.push(CloudPoint::new(intr.unproject(8.1, 8.0, 2.0)));
        let s = densify(&cloud, &d, &n, &intr, &FusionConfig::default()).unwrap();
        assert_eq!(s.provenance(8, 8), Provenance::Sampled);
        assert!((s.position(8, 8) - intr.unproject(8.1, 8.0, 2.0)).norm() < 1e-12);
    }

    #[test]
    fn bias_correction_fixed_point() {
        let s = plane_surface(24, 24, 4.0);
        let out = correct_normal_bias(&s, &FusionConfig::default());
        for (x, y) in out.valid_pixels() {
            let d = (out.corrected_normal(x, y) - s.measured_normal(x, y)).norm();
            assert!(d < 1e-9, "({x},{y}): {d}");
        }
    }

    #[test]
    fn bias_correction_removes_constant_rotation() {
        // Plane with measured normals rotated by a constant 5 degrees about
        // x: corrected normals must return to the position normals.
        let mut s = plane_surface(24, 24, 4.0);
        let bias = UnitQuaternion::from_axis_angle(
            &nalgebra::Unit::new_normalize(Vector3::new(1.0, 0.0, 0.0)),
            5f64.to_radians(),
        );
        for i in 0..s.measured_normal.len() {
            if s.valid[i] {
                s.measured_normal[i] = bias * s.measured_normal[i];
                s.corrected_normal[i] = s.measured_normal[i];
            }
        }
        let out = correct_normal_bias(&s, &FusionConfig::default());
        let expected = Vector3::new(0.0, 0.0, -1.0);
        for (x, y) in out.valid_pixels() {
            let angle = out
                .corrected_normal(x, y)
                .dot(&expected)
                .clamp(-1.0, 1.0)
                .acos()
                .to_degrees();
            assert!(angle < 0.1, "({x},{y}): {angle} deg");
        }
    }

    #[test]
    fn bias_correction_all_invalid_is_noop() {
        let s = FusedSurface::empty(8, 8);
        let out = correct_normal_bias(&s, &FusionConfig::default());
        assert_eq!(out.valid_count(), 0);
    }

    #[test]
    fn joint_optimize_consistent_plane_is_fixed_point() {
        let s = plane_surface(16, 16, 3.0);
        let (cloud, _) = joint_optimize(&s, &FusionConfig::default()).unwrap();
        for (i, (x, y)) in s.valid_pixels().enumerate() {
            let d = (cloud.points[i].position - s.position(x, y)).norm();
            assert!(d < 1e-6, "({x},{y}): {d}");
        }
    }

    #[test]
    fn joint_optimize_zero_normal_weight_returns_measurements() {
        let mut s = plane_surface(12, 12, 3.0);
        // Perturb positions so the measurement is not already optimal for
        // any normal term.
        for (k, p) in s.position.iter_mut().enumerate() {
            p.z += 0.01 * ((k % 7) as f64 - 3.0);
        }
        let cfg = FusionConfig {
            weight_normal: 0.0,
            ..FusionConfig::default()
        };
        let (cloud, _) = joint_optimize(&s, &cfg).unwrap();
        for (i, (x, y)) in s.valid_pixels().enumerate() {
            assert!((cloud.points[i].position - s.position(x, y)).norm() < 1e-8);
        }
    }

    #[test]
    fn joint_optimize_never_worse_than_input() {
        let mut s = plane_surface(20, 20, 3.0);
        let mut seed = 1u64;
        for p in s.position.iter_mut() {
            // Cheap deterministic pseudo-noise.
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let r = ((seed >> 33) as f64 / (1u64 << 31) as f64) - 1.0;
            p.z += 0.03 * r;
        }
        let cfg = FusionConfig::default();
        let measured: Vec<Vector3<f64>> = s.valid_pixels().map(|(x, y)| s.position(x, y)).collect();
        let (cloud, iters) = joint_optimize(&s, &cfg).unwrap();
        let solution: Vec<Vector3<f64>> = cloud.points.iter().map(|p| p.position).collect();
        let at_input = objective_value(&s, &measured, &cfg);
        let at_solution = objective_value(&s, &solution, &cfg);
        assert!(at_solution <= at_input + 1e-12, "{at_solution} vs {at_input}");
        assert!(iters <= cfg.max_iterations);
    }

    #[test]
    fn normal_term_residual_decreases_with_weight() {
        let mut s = plane_surface(16, 16, 3.0);
        let mut seed = 9u64;
        for p in s.position.iter_mut() {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let r = ((seed >> 33) as f64 / (1u64 << 31) as f64) - 1.0;
            p.z += 0.02 * r;
        }
        let normal_residual = |positions: &[Vector3<f64>]| {
            let cfg = FusionConfig {
                weight_position: 0.0,
                weight_normal: 1.0,
                ..FusionConfig::default()
            };
            // weight_position = 0 makes objective_value return just the
            // tangent term.
            objective_value(&s, positions, &cfg)
        };
        let mut last = f64::INFINITY;
        for wn in [0.5, 3.0, 20.0] {
            let cfg = FusionConfig {
                weight_normal: wn,
                ..FusionConfig::default()
            };
            let (cloud, _) = joint_optimize(&s, &cfg).unwrap();
            let positions: Vec<Vector3<f64>> = cloud.points.iter().map(|p| p.position).collect();
            let res = normal_residual(&positions);
            assert!(res < last, "wn={wn}: {res} !< {last}");
            last = res;
        }
    }

    #[test]
    fn rigid_motion_equivariance() {
        let mut s = plane_surface(14, 14, 3.0);
        let mut seed = 4u64;
        for p in s.position.iter_mut() {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let r = ((seed >> 33) as f64 / (1u64 << 31) as f64) - 1.0;
            p.z += 0.02 * r;
        }
        let cfg = FusionConfig::default();
        let (base, _) = joint_optimize(&s, &cfg).unwrap();

        let rot = UnitQuaternion::from_axis_angle(
            &nalgebra::Unit::new_normalize(Vector3::new(0.3, 1.0, -0.2)),
            0.4,
        );
        let t = Vector3::new(0.7, -1.1, 2.0);
        let mut moved = s.clone();
        for i in 0..moved.position.len() {
            if moved.valid[i] {
                moved.position[i] = rot * moved.position[i] + t;
                moved.measured_normal[i] = rot * moved.measured_normal[i];
                moved.corrected_normal[i] = rot * moved.corrected_normal[i];
            }
        }
        let (transformed, _) = joint_optimize(&moved, &cfg).unwrap();
        for (a, b) in base.points.iter().zip(&transformed.points) {
            let expected = rot * a.position + t;
            assert!((expected - b.position).norm() < 1e-6);
        }
    }

    #[test]
    fn output_normals_unit() {
        let s = plane_surface(10, 10, 2.0);
        let (cloud, _) = joint_optimize(&s, &FusionConfig::default()).unwrap();
        for p in &cloud.points {
            assert!((p.normal.unwrap().norm() - 1.0).abs() < 1e-6);
        }
    }
}

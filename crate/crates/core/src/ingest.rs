//! Keyframe ingestion: inverse-depth extraction, metric rescaling, hole
//! filling, depth-gradient prior normals and backprojection.

use crate::cloud::{CloudPoint, PointCloud};
use crate::geometry::{CameraIntrinsics, CameraPose};
use crate::image::{DepthMap, InverseDepthMap, MultispectralImage, NormalMap};
use crate::kdtree::KdTree;
use nalgebra::Vector3;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IngestError {
    #[error("scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("depth map has no valid pixel to interpolate from")]
    AllInvalid,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// One keyframe as delivered by the SLAM side.
#[derive(Debug, Clone)]
pub struct KeyframeBundle {
    pub id: u32,
    pub image: MultispectralImage,
    pub inverse_depth: InverseDepthMap,
    /// Sim(3) camera-to-world pose as listed in the trajectory file.
    pub pose: CameraPose,
    /// Scene scale factor: multiplying extracted depths by this restores
    /// metric units (the tracker normalizes each keyframe to mean inverse
    /// depth one).
    pub scale: f64,
    pub intrinsics: CameraIntrinsics,
}

impl KeyframeBundle {
    /// Pose relating the metric camera frame to the world: rotation and
    /// translation only, valid once depths have been rescaled by `scale`.
    pub fn metric_pose(&self) -> CameraPose {
        self.pose.with_unit_scale()
    }

    pub fn check(&self) -> Result<(), IngestError> {
        if (self.image.width, self.image.height)
            != (self.inverse_depth.width, self.inverse_depth.height)
        {
            return Err(IngestError::DimensionMismatch(format!(
                "keyframe {}: image {}x{} vs inverse depth {}x{}",
                self.id,
                self.image.width,
                self.image.height,
                self.inverse_depth.width,
                self.inverse_depth.height
            )));
        }
        if !(self.scale > 0.0) {
            return Err(IngestError::NonPositiveScale(self.scale));
        }
        Ok(())
    }
}

/// Inverse depths at or below this are treated as invalid.
const INV_DEPTH_EPS: f64 = 1e-9;

/// Converts an inverse depth map to a depth map.
///
/// Values above a small epsilon invert to a valid depth; non-positive or
/// missing values become the invalid 0 sentinel.
pub fn invdepth_to_depth(idmap: &InverseDepthMap) -> DepthMap {
    let mut out = DepthMap::invalid(idmap.width, idmap.height);
    for y in 0..idmap.height {
        for x in 0..idmap.width {
            if let Some(v) = idmap.get(x, y) {
                if v > INV_DEPTH_EPS {
                    out.set(x, y, 1.0 / v);
                }
            }
        }
    }
    out
}

/// Multiplies every valid depth by `scale`, keeping validity and the
/// interpolation flags unchanged.
pub fn rescale_depth(depth: &DepthMap, scale: f64) -> Result<DepthMap, IngestError> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(IngestError::NonPositiveScale(scale));
    }
    let mut out = depth.clone();
    for y in 0..depth.height {
        for x in 0..depth.width {
            if depth.is_valid(x, y) {
                let d = depth.raw(x, y) * scale;
                if depth.is_interpolated(x, y) {
                    out.set_interpolated(x, y, d);
                } else {
                    out.set(x, y, d);
                }
            }
        }
    }
    Ok(out)
}

/// Fills every invalid pixel from the measured neighborhood.
///
/// Each hole takes the inverse-distance-weighted combination of the nearest
/// valid pixel in each of the four axis directions (left/right along the row,
/// up/down along the column). Holes whose entire row and column are invalid
/// fall back to the nearest valid pixel overall (Euclidean, smallest index on
/// ties). Valid input pixels pass through bit-for-bit; filled pixels are
/// flagged interpolated.
pub fn fill_holes_bilinear(depth: &DepthMap) -> Result<DepthMap, IngestError> {
    let (w, h) = (depth.width, depth.height);
    if depth.valid_count() == 0 {
        return Err(IngestError::AllInvalid);
    }
    let mut out = depth.clone();

    // Nearest valid pixel along each axis direction, by two sweeps per axis.
    // entry = (distance in pixels, value).
    let mut left: Vec<Option<(usize, f64)>> = vec![None; w * h];
    let mut right: Vec<Option<(usize, f64)>> = vec![None; w * h];
    let mut up: Vec<Option<(usize, f64)>> = vec![None; w * h];
    let mut down: Vec<Option<(usize, f64)>> = vec![None; w * h];

    for y in 0..h {
        let mut last: Option<(usize, f64)> = None;
        for x in 0..w {
            if depth.is_valid(x, y) {
                last = Some((x, depth.raw(x, y)));
            } else if let Some((vx, v)) = last {
                left[y * w + x] = Some((x - vx, v));
            }
        }
        let mut last: Option<(usize, f64)> = None;
        for x in (0..w).rev() {
            if depth.is_valid(x, y) {
                last = Some((x, depth.raw(x, y)));
            } else if let Some((vx, v)) = last {
                right[y * w + x] = Some((vx - x, v));
            }
        }
    }
    for x in 0..w {
        let mut last: Option<(usize, f64)> = None;
        for y in 0..h {
            if depth.is_valid(x, y) {
                last = Some((y, depth.raw(x, y)));
            } else if let Some((vy, v)) = last {
                up[y * w + x] = Some((y - vy, v));
            }
        }
        let mut last: Option<(usize, f64)> = None;
        for y in (0..h).rev() {
            if depth.is_valid(x, y) {
                last = Some((y, depth.raw(x, y)));
            } else if let Some((vy, v)) = last {
                down[y * w + x] = Some((vy - y, v));
            }
        }
    }

    // Lazily built fallback index for pixels isolated on both axes.
    let mut fallback: Option<(KdTree, Vec<f64>)> = None;

    for y in 0..h {
        for x in 0..w {
            if depth.is_valid(x, y) {
                continue;
            }
            let i = y * w + x;
            let mut weight_sum = 0.0;
            let mut value_sum = 0.0;
            for axis_hit in [left[i], right[i], up[i], down[i]].into_iter().flatten() {
                let (dist, value) = axis_hit;
                let weight = 1.0 / dist as f64;
                weight_sum += weight;
                value_sum += weight * value;
            }
            let filled = if weight_sum > 0.0 {
                value_sum / weight_sum
            } else {
                let (tree, values) = fallback.get_or_insert_with(|| {
                    let mut pts = Vec::new();
                    let mut vals = Vec::new();
                    for vy in 0..h {
                        for vx in 0..w {
                            if depth.is_valid(vx, vy) {
                                pts.push(Vector3::new(vx as f64, vy as f64, 0.0));
                                vals.push(depth.raw(vx, vy));
                            }
                        }
                    }
                    (KdTree::build(&pts), vals)
                });
                let (idx, _) = tree
                    .nearest(&Vector3::new(x as f64, y as f64, 0.0))
                    .expect("at least one valid pixel");
                values[idx]
            };
            out.set_interpolated(x, y, filled);
        }
    }
    Ok(out)
}

/// Per-pixel camera-frame point for a valid depth pixel.
#[inline]
fn backprojected(depth: &DepthMap, intr: &CameraIntrinsics, x: usize, y: usize) -> Option<Vector3<f64>> {
    depth
        .get(x, y)
        .map(|d| intr.unproject(x as f64, y as f64, d))
}

/// Surface normals from central-difference depth gradients.
///
/// Tangent vectors are finite differences of the backprojected surface along
/// the two image axes (central in the interior, one-sided at borders); the
/// normal is their cross product, normalized and oriented toward the camera
/// (`n · p < 0`). Pixels whose stencil touches an invalid depth are invalid;
/// pixels whose stencil touches an interpolated depth are flagged
/// interpolated.
pub fn depth_to_prior_normals(depth: &DepthMap, intr: &CameraIntrinsics) -> NormalMap {
    let (w, h) = (depth.width, depth.height);
    let mut out = NormalMap::invalid(w, h);
    for y in 0..h {
        for x in 0..w {
            if !depth.is_valid(x, y) {
                continue;
            }
            let center = backprojected(depth, intr, x, y).unwrap();

            let tangent_u = match (
                x.checked_sub(1).and_then(|xm| backprojected(depth, intr, xm, y)),
                (x + 1 < w).then(|| backprojected(depth, intr, x + 1, y)).flatten(),
            ) {
                (Some(pm), Some(pp)) => Some((pp - pm) * 0.5),
                (None, Some(pp)) if x == 0 => Some(pp - center),
                (Some(pm), None) if x + 1 == w => Some(center - pm),
                _ => None,
            };
            let tangent_v = match (
                y.checked_sub(1).and_then(|ym| backprojected(depth, intr, x, ym)),
                (y + 1 < h).then(|| backprojected(depth, intr, x, y + 1)).flatten(),
            ) {
                (Some(pm), Some(pp)) => Some((pp - pm) * 0.5),
                (None, Some(pp)) if y == 0 => Some(pp - center),
                (Some(pm), None) if y + 1 == h => Some(center - pm),
                _ => None,
            };
            let (Some(tu), Some(tv)) = (tangent_u, tangent_v) else {
                continue;
            };

            let mut n = tu.cross(&tv);
            let norm = n.norm();
            // Degenerate gradient: parallel tangents leave no normal.
            if norm <= 1e-30 {
                continue;
            }
            n /= norm;
            if n.dot(&center) > 0.0 {
                n = -n;
            }
            out.set(x, y, n);

            let mut touched_interpolated = depth.is_interpolated(x, y);
            for (nx, ny) in [
                (x.wrapping_sub(1), y),
                (x + 1, y),
                (x, y.wrapping_sub(1)),
                (x, y + 1),
            ] {
                if nx < w && ny < h && depth.is_valid(nx, ny) {
                    touched_interpolated |= depth.is_interpolated(nx, ny);
                }
            }
            out.set_interpolated_flag(x, y, touched_interpolated);
        }
    }
    out
}

/// Backprojects every valid depth pixel into a world-frame point cloud.
pub fn backproject(depth: &DepthMap, intr: &CameraIntrinsics, pose: &CameraPose) -> PointCloud {
    let mut cloud = PointCloud::with_capacity(depth.valid_count());
    for y in 0..depth.height {
        for x in 0..depth.width {
            if let Some(p_cam) = backprojected(depth, intr, x, y) {
                cloud.push(CloudPoint::new(pose.apply(p_cam)));
            }
        }
    }
    cloud
}

/// Backprojection that also samples per-point color from the image.
pub fn backproject_colored(
    depth: &DepthMap,
    image: &MultispectralImage,
    intr: &CameraIntrinsics,
    pose: &CameraPose,
    keyframe_id: u32,
) -> PointCloud {
    let max = image.max_channel().max(1e-12);
    let mut cloud = PointCloud::with_capacity(depth.valid_count());
    for y in 0..depth.height {
        for x in 0..depth.width {
            if let Some(p_cam) = backprojected(depth, intr, x, y) {
                let c = image.get(x, y) / max;
                let mut point = CloudPoint::new(pose.apply(p_cam));
                point.color = Some([c.x.clamp(0.0, 1.0), c.y.clamp(0.0, 1.0), c.z.clamp(0.0, 1.0)]);
                point.keyframe_id = Some(keyframe_id);
                cloud.push(point);
            }
        }
    }
    cloud
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(640.0, 640.0, 256.0, 256.0, 512, 512).unwrap()
    }

    #[test]
    fn invdepth_extraction_rules() {
        let mut id = InverseDepthMap::missing(3, 1);
        id.set(0, 0, Some(0.5));
        id.set(1, 0, Some(-0.1));
        // (2,0) stays missing.
        let d = invdepth_to_depth(&id);
        assert_eq!(d.get(0, 0), Some(2.0));
        assert_eq!(d.raw(1, 0), 0.0);
        assert!(!d.is_valid(1, 0));
        assert_eq!(d.raw(2, 0), 0.0);
        assert!(!d.is_valid(2, 0));
    }

    #[test]
    fn invdepth_round_trip() {
        let mut id = InverseDepthMap::missing(4, 2);
        for (i, v) in [0.25, 1.0, 3.0, 0.125, 2.0, 0.4, 5.0, 0.8].iter().enumerate() {
            id.set(i % 4, i / 4, Some(*v));
        }
        let d = invdepth_to_depth(&id);
        for y in 0..2 {
            for x in 0..4 {
                let back = 1.0 / d.get(x, y).unwrap();
                assert!((back - id.get(x, y).unwrap()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rescale_scales_valid_depths_only() {
        let mut d = DepthMap::invalid(2, 1);
        d.set(0, 0, 2.0);
        let out = rescale_depth(&d, 3.0).unwrap();
        assert_eq!(out.get(0, 0), Some(6.0));
        assert!(!out.is_valid(1, 0));
        assert_eq!(rescale_depth(&d, 1.0).unwrap().get(0, 0), Some(2.0));
        assert!(matches!(
            rescale_depth(&d, 0.0),
            Err(IngestError::NonPositiveScale(_))
        ));
    }

    #[test]
    fn rescale_mean_inverse_depth() {
        // Three depths whose inverse depths average exactly 1.
        let mut d = DepthMap::invalid(3, 1);
        d.set(0, 0, 2.0); // inv 0.5
        d.set(1, 0, 1.0); // inv 1.0
        d.set(2, 0, 1.0 / 1.5); // inv 1.5
        let s = 4.0;
        let out = rescale_depth(&d, s).unwrap();
        let mean_inv: f64 = (0..3).map(|x| 1.0 / out.get(x, 0).unwrap()).sum::<f64>() / 3.0;
        assert!((mean_inv - 1.0 / s).abs() < 1e-12);
    }

    #[test]
    fn fill_holes_equidistant_average() {
        let mut d = DepthMap::invalid(3, 1);
        d.set(0, 0, 4.0);
        d.set(2, 0, 8.0);
        let out = fill_holes_bilinear(&d).unwrap();
        assert_eq!(out.get(1, 0), Some(6.0));
        assert!(out.is_interpolated(1, 0));
        assert!(!out.is_interpolated(0, 0));
    }

    #[test]
    fn fill_holes_inverse_distance_weighting() {
        // Hole at (1,2) of a 5x5 map: valid on its row at distance 1 (value
        // 10, left) and distance 3 (value 2, right), column fully invalid.
        let mut d = DepthMap::invalid(5, 5);
        d.set(0, 2, 10.0);
        d.set(4, 2, 2.0);
        let out = fill_holes_bilinear(&d).unwrap();
        let expected = (10.0 * 1.0 + 2.0 * (1.0 / 3.0)) / (1.0 + 1.0 / 3.0);
        assert!((out.get(1, 2).unwrap() - expected).abs() < 1e-12);
        assert_eq!(expected, 8.0);
    }

    #[test]
    fn fill_holes_fully_valid_is_identity() {
        let mut d = DepthMap::invalid(3, 2);
        for y in 0..2 {
            for x in 0..3 {
                d.set(x, y, 1.0 + (y * 3 + x) as f64);
            }
        }
        let out = fill_holes_bilinear(&d).unwrap();
        assert_eq!(out, d);
    }

    #[test]
    fn fill_holes_idempotent_and_preserves_measurements() {
        let mut d = DepthMap::invalid(7, 5);
        d.set(1, 1, 3.0);
        d.set(5, 3, 9.0);
        d.set(2, 4, 5.5);
        let once = fill_holes_bilinear(&d).unwrap();
        let twice = fill_holes_bilinear(&once).unwrap();
        assert_eq!(once, twice);
        assert_eq!(once.get(1, 1), Some(3.0));
        assert_eq!(once.get(5, 3), Some(9.0));
        assert!((0..5).all(|y| (0..7).all(|x| once.is_valid(x, y))));
    }

    #[test]
    fn fill_holes_isolated_pixel_uses_nearest_valid() {
        // Valid pixels only at (0,0) and (5,5). Pixel (3,2) has no valid
        // pixel on row 2 or column 3 and must fall back to the globally
        // nearest valid pixel.
        let mut d = DepthMap::invalid(6, 6);
        d.set(0, 0, 2.0);
        d.set(5, 5, 10.0);
        let out = fill_holes_bilinear(&d).unwrap();
        // (3,2): distance to (0,0) is sqrt(13), to (5,5) sqrt(13) — tie
        // resolves to the smaller index, i.e. (0,0).
        assert_eq!(out.get(3, 2), Some(2.0));
        assert!(out.is_interpolated(3, 2));
    }

    #[test]
    fn fill_holes_all_invalid_errors() {
        let d = DepthMap::invalid(4, 4);
        assert!(matches!(fill_holes_bilinear(&d), Err(IngestError::AllInvalid)));
    }

    #[test]
    fn prior_normals_frontoparallel_plane() {
        let intr = intr();
        let mut d = DepthMap::invalid(64, 64);
        for y in 0..64 {
            for x in 0..64 {
                d.set(x, y, 5.0);
            }
        }
        let n = depth_to_prior_normals(&d, &intr);
        for y in 0..64 {
            for x in 0..64 {
                let v = n.get(x, y).unwrap();
                assert!((v - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-9, "at ({x},{y}): {v:?}");
            }
        }
    }

    #[test]
    fn prior_normals_slanted_plane() {
        // Plane z = 2 + 0.5 X with X the camera-frame lateral coordinate:
        // X = (u - cx)/fx * z  =>  z = 2 / (1 - 0.5 (u - cx)/fx).
        // Tangents (1, 0, 0.5) and (0, 1, 0) give +/-(-0.5, 0, 1); the
        // camera-facing choice (n . p < 0 for all plane points) is
        // (0.5, 0, -1)/sqrt(1.25).
        let intr = intr();
        let mut d = DepthMap::invalid(512, 512);
        for y in 0..512 {
            for x in 0..512 {
                let z = 2.0 / (1.0 - 0.5 * (x as f64 - intr.cx) / intr.fx);
                assert!(z > 0.0);
                d.set(x, y, z);
            }
        }
        let n = depth_to_prior_normals(&d, &intr);
        let expected = Vector3::new(0.4472135954999579, 0.0, -0.8944271909999159);
        for &(x, y) in &[(10usize, 10usize), (256, 256), (500, 40), (128, 480)] {
            let v = n.get(x, y).unwrap();
            assert!((v - expected).norm() < 1e-6, "at ({x},{y}): {v:?}");
        }
    }

    #[test]
    fn prior_normals_unit_and_invalid_near_holes() {
        let intr = intr();
        let mut d = DepthMap::invalid(8, 8);
        for y in 0..8 {
            for x in 0..8 {
                if (x, y) != (4, 4) {
                    d.set(x, y, 3.0 + 0.01 * x as f64);
                }
            }
        }
        let n = depth_to_prior_normals(&d, &intr);
        assert!(!n.is_valid(4, 4));
        // Stencil neighbors of the hole are invalid too.
        assert!(!n.is_valid(3, 4));
        assert!(!n.is_valid(5, 4));
        assert!(!n.is_valid(4, 3));
        assert!(!n.is_valid(4, 5));
        for y in 0..8 {
            for x in 0..8 {
                if let Some(v) = n.get(x, y) {
                    assert!((v.norm() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn prior_normals_flag_interpolated_stencils() {
        let intr = intr();
        // Odd columns are holes; filling flags them interpolated.
        let mut d = DepthMap::invalid(5, 5);
        for y in 0..5 {
            for x in [0, 2, 4] {
                d.set(x, y, 4.0);
            }
        }
        let filled = fill_holes_bilinear(&d).unwrap();
        let n = depth_to_prior_normals(&filled, &intr);
        // (2,2) sits between interpolated columns; (1,2) is interpolated itself.
        assert!(n.is_valid(2, 2) && n.is_interpolated(2, 2));
        assert!(n.is_valid(1, 2) && n.is_interpolated(1, 2));
    }

    #[test]
    fn backproject_principal_ray_and_unit_tangent() {
        let intr = intr();
        let mut d = DepthMap::invalid(512, 512);
        d.set(256, 256, 3.0);
        let cloud = backproject(&d, &intr, &CameraPose::identity());
        assert_eq!(cloud.len(), 1);
        assert!((cloud.points[0].position - Vector3::new(0.0, 0.0, 3.0)).norm() < 1e-12);

        // Pixel displaced by exactly fx at depth 2 lands at x = 2.
        let mut d = DepthMap::invalid(1024, 512);
        let intr2 = CameraIntrinsics::new(640.0, 640.0, 256.0, 256.0, 1024, 512).unwrap();
        d.set(256 + 640, 256, 2.0);
        let cloud = backproject(&d, &intr2, &CameraPose::identity());
        assert!((cloud.points[0].position - Vector3::new(2.0, 0.0, 2.0)).norm() < 1e-12);
    }

    #[test]
    fn backproject_empty_map() {
        let intr = intr();
        let d = DepthMap::invalid(512, 512);
        assert!(backproject(&d, &intr, &CameraPose::identity()).is_empty());
    }

    #[test]
    fn backproject_reproject_identity() {
        let intr = intr();
        let pose = CameraPose::new(
            [0.92, 0.2, -0.1, 0.05],
            Vector3::new(0.3, -0.4, 1.0),
            1.0,
        )
        .unwrap();
        let mut d = DepthMap::invalid(512, 512);
        d.set(100, 200, 2.5);
        d.set(400, 50, 7.0);
        let cloud = backproject(&d, &intr, &pose);
        let inv = pose.inverse();
        let mut k = 0;
        for y in 0..512 {
            for x in 0..512 {
                if d.is_valid(x, y) {
                    let p_cam = inv.apply(cloud.points[k].position);
                    let (u, v) = intr.project(&p_cam).unwrap();
                    assert!((u - x as f64).abs() < 1e-9);
                    assert!((v - y as f64).abs() < 1e-9);
                    assert!((p_cam.z - d.get(x, y).unwrap()).abs() < 1e-9);
                    k += 1;
                }
            }
        }
    }
}

//! Rigid registration of per-keyframe clouds: closed-form alignment from
//! correspondences, trimmed point-to-point ICP over an exact kd-tree, and
//! voxel-deduplicated merging into the global cloud.

use crate::cloud::PointCloud;
use crate::kdtree::KdTree;
use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IcpError {
    #[error("correspondences are degenerate: {0}")]
    DegenerateCorrespondences(String),
    #[error("registration fitness {fitness:.3} below minimum {minimum:.3}")]
    InsufficientOverlap { fitness: f64, minimum: f64 },
    #[error("cannot register empty clouds")]
    EmptyCloud,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpConfig {
    pub max_iterations: usize,
    /// Stop when the trimmed RMS changes by less than this between
    /// iterations (scene units).
    pub convergence_threshold: f64,
    /// Correspondences farther than this are discarded.
    pub max_correspondence_distance: f64,
    /// Fraction of the worst remaining correspondences trimmed per
    /// iteration, in [0, 1).
    pub trim_fraction: f64,
    /// Registrations with final fitness below this fail.
    pub min_overlap_fitness: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            convergence_threshold: 1e-6,
            max_correspondence_distance: f64::INFINITY,
            trim_fraction: 0.1,
            min_overlap_fitness: 0.3,
        }
    }
}

/// Rigid SE(3) transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Rotation angle in degrees.
    pub fn rotation_angle_deg(&self) -> f64 {
        let trace = self.rotation.trace();
        (((trace - 1.0) / 2.0).clamp(-1.0, 1.0)).acos().to_degrees()
    }
}

/// Result of a converged registration.
#[derive(Debug, Clone)]
pub struct Registration {
    pub transform: RigidTransform,
    /// Fraction of source points with a correspondence within the maximum
    /// distance at the final transform.
    pub fitness: f64,
    /// Final trimmed RMS correspondence error, scene units.
    pub rms: f64,
    pub iterations: usize,
    /// Trimmed RMS recorded at each iteration, for monotonicity checks.
    pub rms_trace: Vec<f64>,
}

/// Closed-form least-squares rigid alignment of paired points
/// (cross-covariance SVD, reflection-corrected): minimizes
/// `sum |R s_i + t - t_i|^2`.
pub fn estimate_rigid_transform(
    pairs: &[(Vector3<f64>, Vector3<f64>)],
) -> Result<RigidTransform, IcpError> {
    if pairs.len() < 3 {
        return Err(IcpError::DegenerateCorrespondences(format!(
            "need at least 3 pairs, got {}",
            pairs.len()
        )));
    }
    let n = pairs.len() as f64;
    let src_centroid: Vector3<f64> = pairs.iter().map(|(s, _)| s).sum::<Vector3<f64>>() / n;
    let dst_centroid: Vector3<f64> = pairs.iter().map(|(_, d)| d).sum::<Vector3<f64>>() / n;

    let mut cross = Matrix3::zeros();
    let mut src_scatter = Matrix3::zeros();
    for (s, d) in pairs {
        let sc = s - src_centroid;
        let dc = d - dst_centroid;
        cross += dc * sc.transpose();
        src_scatter += sc * sc.transpose();
    }

    // Collinear sources leave the rotation about the line undetermined.
    let scatter_eigen = src_scatter.symmetric_eigenvalues();
    let mut eig: Vec<f64> = scatter_eigen.iter().copied().collect();
    eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if eig[1] <= 1e-12 * eig[2].max(1.0) {
        return Err(IcpError::DegenerateCorrespondences(
            "source points are collinear".into(),
        ));
    }

    let svd = cross.svd(true, true);
    let u = svd.u.expect("svd with u");
    let v_t = svd.v_t.expect("svd with v_t");
    let det = (u * v_t).determinant();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, det.signum()));
    let rotation = u * correction * v_t;
    let translation = dst_centroid - rotation * src_centroid;
    Ok(RigidTransform {
        rotation,
        translation,
    })
}

/// Trimmed point-to-point ICP of `source` onto `target`.
///
/// Each iteration transforms the source by the current estimate, matches
/// every point to its exact nearest target neighbor, discards matches
/// beyond the maximum distance, trims the worst `trim_fraction` of the
/// remainder, and re-estimates the transform in closed form.
pub fn icp_register(
    source: &PointCloud,
    target: &PointCloud,
    cfg: &IcpConfig,
) -> Result<Registration, IcpError> {
    if source.is_empty() || target.is_empty() {
        return Err(IcpError::EmptyCloud);
    }
    let target_points: Vec<Vector3<f64>> = target.points.iter().map(|p| p.position).collect();
    let tree = KdTree::build(&target_points);
    let source_points: Vec<Vector3<f64>> = source.points.iter().map(|p| p.position).collect();

    let max_dist2 = cfg.max_correspondence_distance * cfg.max_correspondence_distance;
    let mut transform = RigidTransform::identity();
    let mut rms_trace = Vec::new();
    let mut prev_rms = f64::INFINITY;
    let mut iterations = 0;

    for _ in 0..cfg.max_iterations {
        // index in source, squared distance, matched target point
        let mut matches: Vec<(usize, f64, Vector3<f64>)> = source_points
            .par_iter()
            .enumerate()
            .filter_map(|(i, p)| {
                let moved = transform.apply(p);
                let (j, d2) = tree.nearest(&moved).expect("target nonempty");
                (d2 <= max_dist2).then_some((i, d2, target_points[j]))
            })
            .collect();
        if matches.len() < 3 {
            break;
        }
        matches.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        let keep = ((matches.len() as f64) * (1.0 - cfg.trim_fraction)).ceil() as usize;
        let keep = keep.clamp(3.min(matches.len()), matches.len());
        matches.truncate(keep);

        let rms =
            (matches.iter().map(|(_, d2, _)| d2).sum::<f64>() / matches.len() as f64).sqrt();
        rms_trace.push(rms);
        iterations += 1;

        let pairs: Vec<(Vector3<f64>, Vector3<f64>)> = matches
            .iter()
            .map(|&(i, _, t)| (source_points[i], t))
            .collect();
        match estimate_rigid_transform(&pairs) {
            Ok(t) => transform = t,
            Err(_) => break,
        }

        if (prev_rms - rms).abs() < cfg.convergence_threshold {
            break;
        }
        prev_rms = rms;
    }

    // Final fitness and RMS at the converged transform.
    let mut sum_d2 = 0.0;
    let mut dists: Vec<f64> = source_points
        .par_iter()
        .filter_map(|p| {
            let moved = transform.apply(p);
            let (_, d2) = tree.nearest(&moved).expect("target nonempty");
            (d2 <= max_dist2).then_some(d2)
        })
        .collect();
    let fitness = dists.len() as f64 / source_points.len() as f64;
    if fitness < cfg.min_overlap_fitness {
        return Err(IcpError::InsufficientOverlap {
            fitness,
            minimum: cfg.min_overlap_fitness,
        });
    }
    if !dists.is_empty() {
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let keep = (((dists.len() as f64) * (1.0 - cfg.trim_fraction)).ceil() as usize)
            .clamp(1, dists.len());
        sum_d2 = dists[..keep].iter().sum();
        sum_d2 /= keep as f64;
    }

    Ok(Registration {
        transform,
        fitness,
        rms: sum_d2.sqrt(),
        iterations,
        rms_trace,
    })
}

/// Merges `incoming` (transformed by the registration) into `base`. Points
/// landing in the same voxel deduplicate with a fixed preference: points
/// carrying normals beat points without, then the earlier source keyframe
/// id (missing ids last), then earlier insertion order. With `voxel <= 0`
/// the union is kept as-is.
///
/// Callers must have checked the registration fitness already;
/// [`icp_register`] refuses to return one below the configured minimum.
pub fn merge_clouds(
    base: &PointCloud,
    incoming: &PointCloud,
    reg: &Registration,
    voxel: f64,
) -> PointCloud {
    let mut merged = PointCloud::with_capacity(base.len() + incoming.len());
    for p in &base.points {
        merged.push(*p);
    }
    for p in &incoming.points {
        let mut q = *p;
        q.position = reg.transform.apply(&p.position);
        q.normal = p.normal.map(|n| reg.transform.rotation * n);
        merged.push(q);
    }
    if voxel <= 0.0 {
        return merged;
    }

    // Anchor the voxel grid at the cloud's min corner so a voxel larger
    // than the extent collapses everything into one cell.
    let mut origin = Vector3::repeat(f64::INFINITY);
    for p in &merged.points {
        for a in 0..3 {
            origin[a] = origin[a].min(p.position[a]);
        }
    }
    let key = |p: &Vector3<f64>| -> (i64, i64, i64) {
        (
            ((p.x - origin.x) / voxel).floor() as i64,
            ((p.y - origin.y) / voxel).floor() as i64,
            ((p.z - origin.z) / voxel).floor() as i64,
        )
    };
    // Preference order: has-normal first, then smaller keyframe id, then
    // earlier insertion.
    let rank = |p: &crate::cloud::CloudPoint, order: usize| {
        (
            if p.normal.is_some() { 0u8 } else { 1u8 },
            p.keyframe_id.map_or(u32::MAX as u64, |id| id as u64),
            order,
        )
    };

    let mut out = PointCloud::new();
    let mut slots: std::collections::HashMap<(i64, i64, i64), usize> =
        std::collections::HashMap::new();
    let mut ranks: Vec<(u8, u64, usize)> = Vec::new();
    for (order, p) in merged.points.iter().enumerate() {
        let k = key(&p.position);
        let r = rank(p, order);
        match slots.get(&k) {
            None => {
                slots.insert(k, out.len());
                out.push(*p);
                ranks.push(r);
            }
            Some(&slot) => {
                if r < ranks[slot] {
                    out.points[slot] = *p;
                    ranks[slot] = r;
                }
            }
        }
    }
    out
}

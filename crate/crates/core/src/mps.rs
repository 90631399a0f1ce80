//! Multispectral photometric stereo: per-segment mixing-matrix estimation
//! from depth-prior normals and dense normal recovery by `n = M^-1 C`.
//!
//! Each image region of constant chromaticity and albedo shares one 3x3
//! mixing matrix folding light directions, spectral intensities, sensor
//! response and albedo. The matrix is estimated in least squares against
//! prior normals computed from the SLAM depth map, then inverted to recover
//! a normal at every lit pixel.

use crate::geometry::CameraIntrinsics;
use crate::image::{DepthMap, MultispectralImage, NormalMap, PixelMask};
use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MpsError {
    #[error("segment {label}: stored mixing matrix condition number {cond:.3e} exceeds {limit:.3e}")]
    SingularMixing { label: u32, cond: f64, limit: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Why a segment could not be modeled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SegmentFailure {
    /// Fewer usable prior pixels than the configured minimum.
    InsufficientPriors { available: usize, required: usize },
    /// Prior normals do not span rank 3 (e.g. a planar segment).
    DegeneratePriors,
    /// The estimated matrix is too ill-conditioned to invert.
    IllConditioned { cond: f64 },
}

/// Per-pixel integer labels; 0 means unassigned/background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    labels: Vec<u32>,
}

impl LabelMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            labels: vec![0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, labels: Vec<u32>) -> Self {
        assert_eq!(labels.len(), width * height);
        Self {
            width,
            height,
            labels,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, label: u32) {
        self.labels[y * self.width + x] = label;
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Distinct non-zero labels in ascending order.
    pub fn distinct(&self) -> Vec<u32> {
        let mut set: Vec<u32> = self.labels.iter().copied().filter(|&l| l != 0).collect();
        set.sort_unstable();
        set.dedup();
        set
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentationConfig {
    /// Number of chromaticity clusters to seek.
    pub clusters: usize,
    /// Segments smaller than this are merged into their chromatically
    /// nearest neighbor.
    pub min_segment_size: usize,
    pub seed: u64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            clusters: 1,
            min_segment_size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixingConfig {
    /// Reject estimated matrices whose condition number reaches this.
    pub condition_threshold: f64,
    /// Skip priors whose depth stencil was hole-filled.
    pub exclude_interpolated: bool,
    /// Minimum usable prior pixels per segment.
    pub min_prior_pixels: usize,
    /// Minimum smallest eigenvalue of the prior second-moment matrix.
    pub min_prior_eigenvalue: f64,
    /// Largest half-baseline (pixels) for the noise-robust tangency fit.
    pub max_tangency_stride: usize,
    /// Mean squared sine of the prior-vs-model angle above which the priors
    /// are treated as noisy and the robust fit takes over.
    pub noise_gate: f64,
}

impl Default for MixingConfig {
    fn default() -> Self {
        Self {
            condition_threshold: 1e6,
            exclude_interpolated: true,
            min_prior_pixels: 9,
            min_prior_eigenvalue: 1e-6,
            max_tangency_stride: 16,
            noise_gate: 1e-4,
        }
    }
}

/// Per-segment mixing matrices with the label map they apply to.
#[derive(Debug, Clone)]
pub struct MixingModel {
    pub labels: LabelMap,
    segments: BTreeMap<u32, SegmentModel>,
    failures: BTreeMap<u32, SegmentFailure>,
    condition_threshold: f64,
}

#[derive(Debug, Clone, Copy)]
struct SegmentModel {
    matrix: Matrix3<f64>,
    inverse: Matrix3<f64>,
    condition: f64,
}

impl MixingModel {
    /// Builds a model from explicit per-label matrices; used for ground-truth
    /// closures and label-permutation checks.
    pub fn from_matrices(
        labels: LabelMap,
        matrices: &[(u32, Matrix3<f64>)],
        condition_threshold: f64,
    ) -> Result<Self, MpsError> {
        let mut segments = BTreeMap::new();
        for &(label, m) in matrices {
            let (inverse, cond) = invert_with_condition(&m).ok_or(MpsError::SingularMixing {
                label,
                cond: f64::INFINITY,
                limit: condition_threshold,
            })?;
            if cond >= condition_threshold {
                return Err(MpsError::SingularMixing {
                    label,
                    cond,
                    limit: condition_threshold,
                });
            }
            segments.insert(
                label,
                SegmentModel {
                    matrix: m,
                    inverse,
                    condition: cond,
                },
            );
        }
        Ok(Self {
            labels,
            segments,
            failures: BTreeMap::new(),
            condition_threshold,
        })
    }

    pub fn matrix(&self, label: u32) -> Option<&Matrix3<f64>> {
        self.segments.get(&label).map(|s| &s.matrix)
    }

    pub fn condition(&self, label: u32) -> Option<f64> {
        self.segments.get(&label).map(|s| s.condition)
    }

    pub fn failure(&self, label: u32) -> Option<&SegmentFailure> {
        self.failures.get(&label)
    }

    pub fn failures(&self) -> &BTreeMap<u32, SegmentFailure> {
        &self.failures
    }

    pub fn modeled_labels(&self) -> Vec<u32> {
        self.segments.keys().copied().collect()
    }

    pub fn is_modeled(&self, label: u32) -> bool {
        self.segments.contains_key(&label)
    }

    pub fn modeled_count(&self) -> usize {
        self.segments.len()
    }

    /// Applies a label permutation to both the map and the stored matrices.
    pub fn relabeled(&self, perm: &BTreeMap<u32, u32>) -> Self {
        let mut labels = self.labels.clone();
        for y in 0..labels.height {
            for x in 0..labels.width {
                let l = labels.get(x, y);
                if l != 0 {
                    labels.set(x, y, *perm.get(&l).unwrap_or(&l));
                }
            }
        }
        let map_key = |k: &u32| *perm.get(k).unwrap_or(k);
        Self {
            labels,
            segments: self
                .segments
                .iter()
                .map(|(k, v)| (map_key(k), *v))
                .collect(),
            failures: self
                .failures
                .iter()
                .map(|(k, v)| (map_key(k), *v))
                .collect(),
            condition_threshold: self.condition_threshold,
        }
    }
}

fn invert_with_condition(m: &Matrix3<f64>) -> Option<(Matrix3<f64>, f64)> {
    let svd = m.svd(false, false);
    let s_max = svd.singular_values.max();
    let s_min = svd.singular_values.min();
    if !(s_min > 0.0) || !s_max.is_finite() {
        return None;
    }
    let inverse = m.try_inverse()?;
    Some((inverse, s_max / s_min))
}

/// Lit-pixel mask: a pixel is shadowed (false) when any channel is at or
/// below the threshold, since the Lambertian model breaks wherever one
/// light no longer reaches the surface.
pub fn shadow_mask(img: &MultispectralImage, threshold: f64) -> PixelMask {
    assert!(threshold >= 0.0);
    let mut mask = PixelMask::new(img.width, img.height, false);
    for y in 0..img.height {
        for x in 0..img.width {
            let c = img.get(x, y);
            mask.set(x, y, c.iter().all(|&v| v > threshold));
        }
    }
    mask
}

/// Chromaticity of a pixel: channel-normalized color on the simplex.
#[inline]
fn chromaticity(c: &Vector3<f64>) -> Option<Vector3<f64>> {
    let sum = c.sum();
    (sum > 0.0).then(|| c / sum)
}

/// Clusters lit pixels by chromaticity (seeded k-means++ then Lloyd) and
/// merges segments below the minimum size into their chromatically nearest
/// neighbor. Labels are 1..=k' in order of first pixel occurrence; masked or
/// zero-radiance pixels stay 0.
pub fn segment_chromaticity(
    img: &MultispectralImage,
    mask: &PixelMask,
    cfg: &SegmentationConfig,
) -> LabelMap {
    assert!(cfg.clusters >= 1 && cfg.min_segment_size >= 1);
    let (w, h) = (img.width, img.height);
    let mut out = LabelMap::zeros(w, h);

    let mut indices = Vec::new();
    let mut chroma = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                if let Some(c) = chromaticity(&img.get(x, y)) {
                    indices.push(y * w + x);
                    chroma.push(c);
                }
            }
        }
    }
    if indices.is_empty() {
        return out;
    }

    let k = cfg.clusters.min(chroma.len());
    let mut centers = kmeans_pp_init(&chroma, k, cfg.seed);
    let mut assignment = vec![0usize; chroma.len()];
    for _ in 0..50 {
        let mut changed = false;
        for (i, c) in chroma.iter().enumerate() {
            let mut best = (0usize, f64::INFINITY);
            for (j, center) in centers.iter().enumerate() {
                let d = (c - center).norm_squared();
                if d < best.1 {
                    best = (j, d);
                }
            }
            if assignment[i] != best.0 {
                assignment[i] = best.0;
                changed = true;
            }
        }
        let mut sums = vec![Vector3::<f64>::zeros(); k];
        let mut counts = vec![0usize; k];
        for (i, c) in chroma.iter().enumerate() {
            sums[assignment[i]] += c;
            counts[assignment[i]] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j] / counts[j] as f64;
            }
        }
        if !changed {
            break;
        }
    }

    // Merge undersized clusters into the chromatically nearest survivor.
    let mut counts = vec![0usize; k];
    for &a in &assignment {
        counts[a] += 1;
    }
    let mut alive: Vec<usize> = (0..k).filter(|&j| counts[j] > 0).collect();
    loop {
        let Some(&smallest) = alive
            .iter()
            .filter(|&&j| counts[j] < cfg.min_segment_size)
            .min_by_key(|&&j| (counts[j], j))
        else {
            break;
        };
        if alive.len() <= 1 {
            break;
        }
        let target = alive
            .iter()
            .copied()
            .filter(|&j| j != smallest)
            .min_by(|&a, &b| {
                let da = (centers[a] - centers[smallest]).norm_squared();
                let db = (centers[b] - centers[smallest]).norm_squared();
                da.partial_cmp(&db).unwrap().then(a.cmp(&b))
            })
            .expect("at least one other segment");
        // Recompute the absorbed centroid.
        let merged = counts[smallest] + counts[target];
        centers[target] =
            (centers[target] * counts[target] as f64 + centers[smallest] * counts[smallest] as f64)
                / merged as f64;
        counts[target] = merged;
        counts[smallest] = 0;
        for a in assignment.iter_mut() {
            if *a == smallest {
                *a = target;
            }
        }
        alive.retain(|&j| j != smallest);
    }

    // Compact labels in order of first occurrence over the row-major scan.
    let mut relabel: BTreeMap<usize, u32> = BTreeMap::new();
    let mut next = 1u32;
    for (i, &pixel) in indices.iter().enumerate() {
        let cluster = assignment[i];
        let label = *relabel.entry(cluster).or_insert_with(|| {
            let l = next;
            next += 1;
            l
        });
        out.labels[pixel] = label;
    }
    out
}

fn kmeans_pp_init(points: &[Vector3<f64>], k: usize, seed: u64) -> Vec<Vector3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Vec::with_capacity(k);
    centers.push(points[rng.random_range(0..points.len())]);
    let mut dist2: Vec<f64> = points
        .iter()
        .map(|p| (p - centers[0]).norm_squared())
        .collect();
    while centers.len() < k {
        let total: f64 = dist2.iter().sum();
        let next = if total <= 0.0 {
            // All points coincide with a center; any choice is equivalent.
            0
        } else {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = points.len() - 1;
            for (i, &d) in dist2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        };
        let c = points[next];
        centers.push(c);
        for (i, p) in points.iter().enumerate() {
            dist2[i] = dist2[i].min((p - c).norm_squared());
        }
    }
    centers
}

/// Estimates one mixing matrix per segment from the keyframe radiances and
/// the depth priors, using pixels with valid (and, by default,
/// non-interpolated) priors.
///
/// Two fits back the estimate, selected by the measured prior noise:
///
/// * Clean priors (mean squared sine of the prior-vs-model angle below the
///   configured gate): plain least squares of the prior normals against the
///   radiances, `W = argmin sum |n_prior - W C|^2`, stored as `M = W^-1`.
///   Recovers an exactly consistent model to machine precision.
/// * Noisy priors: per-pixel finite differences amplify depth noise too much
///   for any per-pixel normal fit, so the robust path constrains the model
///   normal `W C` to be orthogonal to long-baseline surface tangents read
///   from the depth map (summed central differences telescope, leaving noise
///   only at chord endpoints). The quadratic form of those tangency
///   residuals, minus its expected noise part (depth noise estimated from a
///   robust Laplacian), yields `W` as the smallest eigenvector of a 9x9
///   symmetric matrix; the sign and scale are then fixed against the priors.
///
/// Segments with too few or rank-deficient priors, or an ill-conditioned
/// estimate, are left unmodeled with the failure recorded per segment.
pub fn estimate_mixing(
    img: &MultispectralImage,
    depth: &DepthMap,
    intr: &CameraIntrinsics,
    priors: &NormalMap,
    labels: &LabelMap,
    cfg: &MixingConfig,
) -> Result<MixingModel, MpsError> {
    if (img.width, img.height) != (priors.width, priors.height)
        || (img.width, img.height) != (labels.width, labels.height)
        || (img.width, img.height) != (depth.width, depth.height)
    {
        return Err(MpsError::DimensionMismatch(format!(
            "image {}x{}, depth {}x{}, priors {}x{}, labels {}x{}",
            img.width,
            img.height,
            depth.width,
            depth.height,
            priors.width,
            priors.height,
            labels.width,
            labels.height
        )));
    }

    struct Accum {
        gram_priors: Matrix3<f64>,
        gram_radiance: Matrix3<f64>,
        cross: Matrix3<f64>,
        /// Pixels passing the prior-quality gate (valid, non-interpolated).
        pixels: Vec<(usize, usize)>,
    }
    let mut accum: BTreeMap<u32, Accum> = BTreeMap::new();

    for y in 0..img.height {
        for x in 0..img.width {
            let label = labels.get(x, y);
            if label == 0 {
                continue;
            }
            let Some(n) = priors.get(x, y) else { continue };
            if cfg.exclude_interpolated && priors.is_interpolated(x, y) {
                continue;
            }
            let c = img.get(x, y);
            let entry = accum.entry(label).or_insert_with(|| Accum {
                gram_priors: Matrix3::zeros(),
                gram_radiance: Matrix3::zeros(),
                cross: Matrix3::zeros(),
                pixels: Vec::new(),
            });
            entry.gram_priors += n * n.transpose();
            entry.gram_radiance += c * c.transpose();
            entry.cross += n * c.transpose();
            entry.pixels.push((x, y));
        }
    }

    // Chord constraints and the depth-noise scale are shared by every
    // segment; build them lazily only when some segment needs the robust fit.
    let mut chord_state: Option<(BTreeMap<u32, Vec<Chord>>, Option<f64>)> = None;

    let mut segments = BTreeMap::new();
    let mut failures = BTreeMap::new();
    for label in labels.distinct() {
        let Some(acc) = accum.get(&label) else {
            failures.insert(
                label,
                SegmentFailure::InsufficientPriors {
                    available: 0,
                    required: cfg.min_prior_pixels,
                },
            );
            continue;
        };
        let count = acc.pixels.len();
        if count < cfg.min_prior_pixels {
            failures.insert(
                label,
                SegmentFailure::InsufficientPriors {
                    available: count,
                    required: cfg.min_prior_pixels,
                },
            );
            continue;
        }
        let second_moment = acc.gram_priors / count as f64;
        let eigen = second_moment.symmetric_eigenvalues();
        if eigen.min() <= cfg.min_prior_eigenvalue {
            failures.insert(label, SegmentFailure::DegeneratePriors);
            continue;
        }
        // Radiance Gram must be invertible too; a rank-deficient radiance
        // distribution means the mixing cannot be resolved.
        let radiance_eigen = acc.gram_radiance.symmetric_eigenvalues();
        let radiance_scale = radiance_eigen.max().max(f64::MIN_POSITIVE);
        if radiance_eigen.min() <= 1e-12 * radiance_scale {
            failures.insert(
                label,
                SegmentFailure::IllConditioned { cond: f64::INFINITY },
            );
            continue;
        }
        let gram_inv = acc
            .gram_radiance
            .try_inverse()
            .expect("radiance gram invertible after eigenvalue check");
        let unmixing = acc.cross * gram_inv;

        // Mean squared sine of the angle between priors and the fitted model
        // decides whether the priors are clean enough for the direct fit.
        let mut sin2_sum = 0.0;
        let mut sin2_count = 0usize;
        for &(x, y) in &acc.pixels {
            let model = unmixing * img.get(x, y);
            let norm = model.norm();
            if norm <= 1e-15 {
                continue;
            }
            let n = priors.get(x, y).expect("sample pixels have valid priors");
            let cross = (model / norm).cross(&n);
            sin2_sum += cross.norm_squared();
            sin2_count += 1;
        }
        let noisy = sin2_count == 0 || sin2_sum / sin2_count as f64 > cfg.noise_gate;

        let m_candidate = if noisy {
            let (chords, sigma) = chord_state.get_or_insert_with(|| {
                (
                    collect_chords(depth, intr, labels, cfg.max_tangency_stride),
                    estimate_depth_sigma(depth),
                )
            });
            match (chords.get(&label), *sigma) {
                (Some(segment_chords), Some(sigma)) => {
                    fit_tangency_robust(img, priors, &acc.pixels, segment_chords, sigma, &unmixing)
                        .or_else(|| unmixing.try_inverse())
                }
                _ => unmixing.try_inverse(),
            }
        } else {
            unmixing.try_inverse()
        };
        let Some(m) = m_candidate else {
            failures.insert(
                label,
                SegmentFailure::IllConditioned { cond: f64::INFINITY },
            );
            continue;
        };
        match invert_with_condition(&m) {
            Some((inverse, cond)) if cond < cfg.condition_threshold => {
                segments.insert(
                    label,
                    SegmentModel {
                        matrix: m,
                        inverse,
                        condition: cond,
                    },
                );
            }
            Some((_, cond)) => {
                failures.insert(label, SegmentFailure::IllConditioned { cond });
            }
            None => {
                failures.insert(
                    label,
                    SegmentFailure::IllConditioned { cond: f64::INFINITY },
                );
            }
        }
    }

    Ok(MixingModel {
        labels: labels.clone(),
        segments,
        failures,
        condition_threshold: cfg.condition_threshold,
    })
}

/// One tangency constraint: the surface chord between two measured depth
/// pixels, applied at the pixel nearest the chord midpoint.
struct Chord {
    tangent: Vector3<f64>,
    midpoint: (usize, usize),
    rays: [Vector3<f64>; 2],
}

/// Chords between consecutive measured (non-interpolated) depth pixels along
/// every row and column, keyed by the segment label at the chord midpoint.
/// Long chords carry the surface signal while their noise stays bounded by
/// the two endpoint measurements.
fn collect_chords(
    depth: &DepthMap,
    intr: &CameraIntrinsics,
    labels: &LabelMap,
    max_half_stride: usize,
) -> BTreeMap<u32, Vec<Chord>> {
    let (w, h) = (depth.width, depth.height);
    let measured = |x: usize, y: usize| depth.is_valid(x, y) && !depth.is_interpolated(x, y);
    let ray = |x: usize, y: usize| {
        Vector3::new(
            (x as f64 - intr.cx) / intr.fx,
            (y as f64 - intr.cy) / intr.fy,
            1.0,
        )
    };
    let target = max_half_stride.max(1);
    let max_gap = 2 * target;
    let mut out: BTreeMap<u32, Vec<Chord>> = BTreeMap::new();
    let mut push = |a: (usize, usize), b: (usize, usize)| {
        let mid = ((a.0 + b.0) / 2, (a.1 + b.1) / 2);
        let label = labels.get(mid.0, mid.1);
        if label == 0 {
            return;
        }
        let ra = ray(a.0, a.1);
        let rb = ray(b.0, b.1);
        let pa = ra * depth.raw(a.0, a.1);
        let pb = rb * depth.raw(b.0, b.1);
        out.entry(label).or_default().push(Chord {
            tangent: (pb - pa) * 0.5,
            midpoint: mid,
            rays: [ra, rb],
        });
    };
    // One forward chord per measured pixel per axis: the nearest partner at
    // least `target` away, else the farthest within the cap. Short chords
    // carry almost no surface signal, so prefer long ones wherever the
    // sampling allows.
    let mut pair_run = |line: &[(usize, usize)]| {
        for (i, &a) in line.iter().enumerate() {
            let mut fallback: Option<(usize, usize)> = None;
            let mut chosen: Option<(usize, usize)> = None;
            for &b in line[i + 1..].iter() {
                let gap = (b.0 - a.0) + (b.1 - a.1);
                if gap > max_gap {
                    break;
                }
                if gap >= target {
                    chosen = Some(b);
                    break;
                }
                fallback = Some(b);
            }
            if let Some(b) = chosen.or(fallback) {
                push(a, b);
            }
        }
    };
    let mut line = Vec::new();
    for y in 0..h {
        line.clear();
        line.extend((0..w).filter(|&x| measured(x, y)).map(|x| (x, y)));
        pair_run(&line);
    }
    for x in 0..w {
        line.clear();
        line.extend((0..h).filter(|&y| measured(x, y)).map(|y| (x, y)));
        pair_run(&line);
    }
    out
}

/// Robust depth-noise scale: MAD of the 5-point Laplacian over measured
/// stencils (variance 20 sigma^2), falling back to adjacent-pair first
/// differences (variance 2 sigma^2 plus a negligible slope term).
fn estimate_depth_sigma(depth: &DepthMap) -> Option<f64> {
    let (w, h) = (depth.width, depth.height);
    let measured = |x: usize, y: usize| depth.is_valid(x, y) && !depth.is_interpolated(x, y);
    let median = |v: &mut Vec<f64>| -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    let mut laplacians: Vec<f64> = Vec::new();
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            if measured(x, y)
                && measured(x - 1, y)
                && measured(x + 1, y)
                && measured(x, y - 1)
                && measured(x, y + 1)
            {
                laplacians.push(
                    depth.raw(x - 1, y) + depth.raw(x + 1, y) + depth.raw(x, y - 1)
                        + depth.raw(x, y + 1)
                        - 4.0 * depth.raw(x, y),
                );
            }
        }
    }
    if laplacians.len() >= 32 {
        let center = median(&mut laplacians.clone());
        let mut dev: Vec<f64> = laplacians.iter().map(|l| (l - center).abs()).collect();
        let mad = median(&mut dev);
        return Some(1.4826 * mad / 20f64.sqrt());
    }
    let mut diffs: Vec<f64> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !measured(x, y) {
                continue;
            }
            if x + 1 < w && measured(x + 1, y) {
                diffs.push(depth.raw(x + 1, y) - depth.raw(x, y));
            }
            if y + 1 < h && measured(x, y + 1) {
                diffs.push(depth.raw(x, y + 1) - depth.raw(x, y));
            }
        }
    }
    if diffs.len() < 9 {
        return None;
    }
    let center = median(&mut diffs.clone());
    let mut dev: Vec<f64> = diffs.iter().map(|d| (d - center).abs()).collect();
    let mad = median(&mut dev);
    Some(1.4826 * mad / 2f64.sqrt())
}

/// Noise-robust mixing fit: the model normal `W C` must be orthogonal to
/// the measured surface chords. The quadratic form of the chord residuals,
/// minus its expected noise contribution, yields `W` as the smallest
/// eigenvector of a 9x9 symmetric matrix; sign and scale are then fixed
/// against the priors. Returns `None` when the segment cannot support the
/// fit.
fn fit_tangency_robust(
    img: &MultispectralImage,
    priors: &NormalMap,
    gated_pixels: &[(usize, usize)],
    chords: &[Chord],
    sigma: f64,
    reference: &Matrix3<f64>,
) -> Option<Matrix3<f64>> {
    if chords.len() < 18 {
        return None;
    }
    let mut a_mat = DMatrix::<f64>::zeros(9, 9);
    let mut noise_mat = DMatrix::<f64>::zeros(9, 9);
    for chord in chords {
        let c = img.get(chord.midpoint.0, chord.midpoint.1);
        let flat = |a: &Vector3<f64>| -> [f64; 9] {
            let mut v = [0.0; 9];
            for j in 0..3 {
                for k in 0..3 {
                    v[j * 3 + k] = a[j] * c[k];
                }
            }
            v
        };
        let v = flat(&chord.tangent);
        for i in 0..9 {
            for j in 0..9 {
                a_mat[(i, j)] += v[i] * v[j];
            }
        }
        // Endpoint noise enters the chord as (eps_b r_b - eps_a r_a) / 2.
        for r in &chord.rays {
            let vr = flat(r);
            for i in 0..9 {
                for j in 0..9 {
                    noise_mat[(i, j)] += 0.25 * vr[i] * vr[j];
                }
            }
        }
    }

    let debiased = &a_mat - &(noise_mat * (sigma * sigma));
    let sym = (&debiased + debiased.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();

    // The noise subtraction works from an estimated sigma, so the floor of
    // the spectrum can smear the sought direction across two or three
    // eigenvectors. Span the floor (eigenvalues gap-comparable to the
    // bottom) and project the direct prior fit onto it: the span contains
    // the solution while the projection discards most of the prior fit's
    // own bias, which lives outside this small subspace.
    let reference_norm = reference.norm();
    if reference_norm <= 1e-30 {
        return None;
    }
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[a]
            .partial_cmp(&eig.eigenvalues[b])
            .unwrap()
    });
    let floor = eig.eigenvalues[order[0]];
    let shelf_gap = eig.eigenvalues[order[3]] - floor;
    let mut w_dir = Matrix3::zeros();
    for &idx in order.iter().take(3) {
        if eig.eigenvalues[idx] - floor > 0.25 * shelf_gap {
            continue;
        }
        let yv = eig.eigenvectors.column(idx);
        let basis = Matrix3::from_fn(|j, k| yv[j * 3 + k]);
        let coefficient = (basis.transpose() * (reference / reference_norm)).trace();
        w_dir += coefficient * basis;
    }
    if w_dir.norm() <= 1e-12 {
        return None;
    }
    let m_dir = w_dir.try_inverse()?;

    // Fix sign and absolute scale against the priors:
    // alpha = argmin sum |C - alpha M n_prior|^2.
    let mut num = 0.0;
    let mut den = 0.0;
    for &(x, y) in gated_pixels {
        let n = priors.get(x, y).expect("gated pixels have valid priors");
        let mn = m_dir * n;
        num += mn.dot(&img.get(x, y));
        den += mn.norm_squared();
    }
    if den <= 1e-30 || num.abs() <= 1e-30 {
        return None;
    }
    Some(m_dir * (num / den))
}

/// Recovers a dense normal map: `n = normalize(M^-1 C)` at every lit,
/// labeled pixel of a modeled segment; everything else is invalid.
pub fn recover_normals(
    img: &MultispectralImage,
    model: &MixingModel,
    mask: &PixelMask,
) -> Result<NormalMap, MpsError> {
    if (img.width, img.height) != (model.labels.width, model.labels.height)
        || (img.width, img.height) != (mask.width, mask.height)
    {
        return Err(MpsError::DimensionMismatch(format!(
            "image {}x{}, labels {}x{}, mask {}x{}",
            img.width, img.height, model.labels.width, model.labels.height, mask.width, mask.height
        )));
    }
    for (&label, seg) in &model.segments {
        if seg.condition >= model.condition_threshold {
            return Err(MpsError::SingularMixing {
                label,
                cond: seg.condition,
                limit: model.condition_threshold,
            });
        }
    }

    let mut out = NormalMap::invalid(img.width, img.height);
    for y in 0..img.height {
        for x in 0..img.width {
            if !mask.get(x, y) {
                continue;
            }
            let label = model.labels.get(x, y);
            if label == 0 {
                continue;
            }
            let Some(seg) = model.segments.get(&label) else {
                continue;
            };
            let n = seg.inverse * img.get(x, y);
            if n.norm() > 1e-15 {
                out.set(x, y, n);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::depth_to_prior_normals;

    fn uniform_mask(w: usize, h: usize) -> PixelMask {
        PixelMask::new(w, h, true)
    }

    #[test]
    fn shadow_mask_thresholds() {
        let mut img = MultispectralImage::zeros(3, 1);
        img.set(0, 0, Vector3::new(0.5, 0.5, 0.5));
        img.set(1, 0, Vector3::new(0.5, 0.0, 0.5));
        img.set(2, 0, Vector3::new(0.2, 0.3, 0.4));
        let m = shadow_mask(&img, 0.1);
        assert!(m.get(0, 0));
        assert!(!m.get(1, 0));
        assert!(m.get(2, 0));
        // Threshold zero: only strictly positive channels stay valid.
        let m0 = shadow_mask(&img, 0.0);
        assert!(m0.get(0, 0));
        assert!(!m0.get(1, 0));
    }

    /// Camera-frame dome z = z0 - curvature (X^2 + Y^2) rendered as a depth
    /// map: a smooth surface whose normals span rank 3.
    fn dome_setup(n: usize) -> (DepthMap, NormalMap, CameraIntrinsics) {
        let intr = CameraIntrinsics::new(
            2.5 * n as f64,
            2.5 * n as f64,
            n as f64 / 2.0,
            n as f64 / 2.0,
            n,
            n,
        )
        .unwrap();
        let mut depth = DepthMap::invalid(n, n);
        for y in 0..n {
            for x in 0..n {
                let q = ((x as f64 - intr.cx) / intr.fx).powi(2)
                    + ((y as f64 - intr.cy) / intr.fy).powi(2);
                // z = 4 - 0.5 (X^2 + Y^2), X = x_norm z: solve the quadratic.
                let z = if q < 1e-15 {
                    4.0
                } else {
                    (-1.0 + (1.0 + 8.0 * q).sqrt()) / q
                };
                depth.set(x, y, z);
            }
        }
        let priors = depth_to_prior_normals(&depth, &intr);
        (depth, priors, intr)
    }

    fn full_labels(n: usize) -> LabelMap {
        let mut labels = LabelMap::zeros(n, n);
        for y in 0..n {
            for x in 0..n {
                labels.set(x, y, 1);
            }
        }
        labels
    }

    fn image_from_model(m: &Matrix3<f64>, normals: &NormalMap) -> MultispectralImage {
        let mut img = MultispectralImage::zeros(normals.width, normals.height);
        for y in 0..normals.height {
            for x in 0..normals.width {
                if let Some(n) = normals.get(x, y) {
                    let c = m * n;
                    assert!(
                        c.iter().all(|&v| v >= 0.0),
                        "model must produce non-negative radiance, got {c:?}"
                    );
                    img.set(x, y, c);
                }
            }
        }
        img
    }

    #[test]
    fn estimate_recovers_known_mixing() {
        let (depth, priors, intr) = dome_setup(48);
        // Rows chosen so C = M0 n stays strictly positive over the dome.
        let m0 = Matrix3::new(0.3, -0.1, -0.9, 0.1, 0.25, -0.8, -0.2, 0.1, -1.1);
        let img = image_from_model(&m0, &priors);
        let labels = full_labels(48);
        let model =
            estimate_mixing(&img, &depth, &intr, &priors, &labels, &MixingConfig::default())
                .unwrap();
        let m = model.matrix(1).expect("segment modeled");
        assert!((m - m0).abs().max() < 1e-6, "estimated {m}");

        let recovered = recover_normals(&img, &model, &uniform_mask(48, 48)).unwrap();
        for y in 0..48 {
            for x in 0..48 {
                let err = (recovered.get(x, y).unwrap() - priors.get(x, y).unwrap()).norm();
                assert!(err < 1e-6);
            }
        }
    }

    #[test]
    fn exactly_consistent_priors_recover_to_machine_precision() {
        let (depth, priors, intr) = dome_setup(32);
        let m0 = Matrix3::new(0.0, 0.0, -1.0, 0.25, 0.0, -0.8, 0.0, 0.25, -0.8);
        let img = image_from_model(&m0, &priors);
        let labels = full_labels(32);
        let model =
            estimate_mixing(&img, &depth, &intr, &priors, &labels, &MixingConfig::default())
                .unwrap();
        assert!((model.matrix(1).unwrap() - m0).abs().max() < 1e-9);
    }

    #[test]
    fn planar_priors_are_degenerate() {
        let n = 16;
        let intr = CameraIntrinsics::new(40.0, 40.0, 8.0, 8.0, n, n).unwrap();
        let mut depth = DepthMap::invalid(n, n);
        for y in 0..n {
            for x in 0..n {
                depth.set(x, y, 3.0);
            }
        }
        let priors = depth_to_prior_normals(&depth, &intr);
        let mut img = MultispectralImage::zeros(n, n);
        for y in 0..n {
            for x in 0..n {
                img.set(x, y, Vector3::new(0.4, 0.5, 0.6));
            }
        }
        let labels = full_labels(n);
        let model =
            estimate_mixing(&img, &depth, &intr, &priors, &labels, &MixingConfig::default())
                .unwrap();
        assert!(!model.is_modeled(1));
        assert_eq!(model.failure(1), Some(&SegmentFailure::DegeneratePriors));
    }

    #[test]
    fn too_few_priors_reported() {
        let (depth, priors, intr) = dome_setup(32);
        let m0 = Matrix3::new(0.3, -0.1, -0.9, 0.1, 0.25, -0.8, -0.2, 0.1, -1.1);
        let img = image_from_model(&m0, &priors);
        // Only a 2x2 patch carries the label.
        let mut labels = LabelMap::zeros(32, 32);
        for y in 10..12 {
            for x in 10..12 {
                labels.set(x, y, 3);
            }
        }
        let model =
            estimate_mixing(&img, &depth, &intr, &priors, &labels, &MixingConfig::default())
                .unwrap();
        assert_eq!(
            model.failure(3),
            Some(&SegmentFailure::InsufficientPriors {
                available: 4,
                required: 9
            })
        );
    }

    #[test]
    fn recover_identity_examples() {
        let mut labels = LabelMap::zeros(2, 1);
        labels.set(0, 0, 1);
        labels.set(1, 0, 1);
        let model =
            MixingModel::from_matrices(labels, &[(1, Matrix3::identity())], 1e6).unwrap();
        let mut img = MultispectralImage::zeros(2, 1);
        img.set(0, 0, Vector3::new(0.0, 0.0, 1.0));
        img.set(1, 0, Vector3::new(0.0, 0.0, 2.0));
        let out = recover_normals(&img, &model, &uniform_mask(2, 1)).unwrap();
        assert_eq!(out.get(0, 0).unwrap(), Vector3::new(0.0, 0.0, 1.0));
        // Normalization kills magnitude.
        assert_eq!(out.get(1, 0).unwrap(), Vector3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn recover_respects_mask_and_coverage() {
        let mut labels = LabelMap::zeros(3, 1);
        labels.set(0, 0, 1);
        labels.set(1, 0, 2); // unmodeled segment
        let model =
            MixingModel::from_matrices(labels, &[(1, Matrix3::identity())], 1e6).unwrap();
        let mut img = MultispectralImage::zeros(3, 1);
        for x in 0..3 {
            img.set(x, 0, Vector3::new(0.3, 0.3, 0.9));
        }
        let mut mask = uniform_mask(3, 1);
        mask.set(2, 0, false);
        let out = recover_normals(&img, &model, &mask).unwrap();
        assert!(out.is_valid(0, 0));
        assert!(!out.is_valid(1, 0)); // segment without a matrix
        assert!(!out.is_valid(2, 0)); // shadow-masked
    }

    #[test]
    fn intensity_scaling_invariance() {
        let (depth, priors, intr) = dome_setup(40);
        let m0 = Matrix3::new(0.3, -0.1, -0.9, 0.1, 0.25, -0.8, -0.2, 0.1, -1.1);
        let img = image_from_model(&m0, &priors);
        let labels = full_labels(40);
        let cfg = MixingConfig::default();
        let model_a = estimate_mixing(&img, &depth, &intr, &priors, &labels, &cfg).unwrap();
        let scaled = img.scaled(3.7);
        let model_b = estimate_mixing(&scaled, &depth, &intr, &priors, &labels, &cfg).unwrap();
        let ma = model_a.matrix(1).unwrap();
        let mb = model_b.matrix(1).unwrap();
        assert!((mb - ma * 3.7).abs().max() < 1e-9);

        let mask = uniform_mask(40, 40);
        let na = recover_normals(&img, &model_a, &mask).unwrap();
        let nb = recover_normals(&scaled, &model_b, &mask).unwrap();
        for y in 0..40 {
            for x in 0..40 {
                let d = (na.get(x, y).unwrap() - nb.get(x, y).unwrap()).norm();
                assert!(d < 1e-9);
            }
        }
    }

    #[test]
    fn label_permutation_equivariance() {
        let (depth, priors, intr) = dome_setup(32);
        let m0 = Matrix3::new(0.3, -0.1, -0.9, 0.1, 0.25, -0.8, -0.2, 0.1, -1.1);
        let img = image_from_model(&m0, &priors);
        let mut labels = LabelMap::zeros(32, 32);
        for y in 0..32 {
            for x in 0..32 {
                labels.set(x, y, if x < 16 { 1 } else { 2 });
            }
        }
        let model =
            estimate_mixing(&img, &depth, &intr, &priors, &labels, &MixingConfig::default())
                .unwrap();
        let perm: BTreeMap<u32, u32> = [(1, 2), (2, 1)].into_iter().collect();
        let permuted = model.relabeled(&perm);
        let mask = uniform_mask(32, 32);
        let a = recover_normals(&img, &model, &mask).unwrap();
        let b = recover_normals(&img, &permuted, &mask).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noisy_priors_take_the_robust_path() {
        // Perturb the dome depth with deterministic pseudo-noise; the gate
        // must reroute to the tangency fit and still land near the truth.
        let (clean_depth, clean_priors, intr) = dome_setup(96);
        let m0 = Matrix3::new(0.3, -0.1, -0.9, 0.1, 0.25, -0.8, -0.2, 0.1, -1.1);
        let img = image_from_model(&m0, &clean_priors);

        let mut depth = clean_depth.clone();
        let mut seed = 0x9e3779b97f4a7c15u64;
        for y in 0..96 {
            for x in 0..96 {
                seed = seed
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                let r = ((seed >> 33) as f64 / (1u64 << 31) as f64) - 1.0;
                let d = clean_depth.raw(x, y) * (1.0 + 0.01 * r);
                depth.set(x, y, d);
            }
        }
        let priors = depth_to_prior_normals(&depth, &intr);
        let labels = full_labels(96);
        let model =
            estimate_mixing(&img, &depth, &intr, &priors, &labels, &MixingConfig::default())
                .unwrap();
        let m = model.matrix(1).expect("segment modeled");
        let rel = (m - m0).norm() / m0.norm();
        assert!(rel < 0.15, "relative error {rel}");
        // The naive fit against these priors would be far off; check the
        // recovered normals stay close to the clean ones.
        let recovered = recover_normals(&img, &model, &uniform_mask(96, 96)).unwrap();
        let mut errs = crate::image::normal_angle_errors_deg(&recovered, &clean_priors);
        let median = crate::image::percentile(&mut errs, 50.0);
        assert!(median < 5.0, "median angular error {median}");
    }

    #[test]
    fn segmentation_uniform_image_collapses_to_one_segment() {
        let mut img = MultispectralImage::zeros(32, 32);
        for y in 0..32 {
            for x in 0..32 {
                img.set(x, y, Vector3::new(0.6, 0.3, 0.1) * (0.5 + 0.4 * (x as f64 / 31.0)));
            }
        }
        let labels = segment_chromaticity(
            &img,
            &uniform_mask(32, 32),
            &SegmentationConfig {
                clusters: 4,
                min_segment_size: 8,
                seed: 11,
            },
        );
        assert_eq!(labels.distinct(), vec![1]);
    }

    #[test]
    fn segmentation_two_halves() {
        let mut img = MultispectralImage::zeros(40, 20);
        for y in 0..20 {
            for x in 0..40 {
                let c = if x < 20 {
                    Vector3::new(0.8, 0.1, 0.1)
                } else {
                    Vector3::new(0.1, 0.1, 0.8)
                };
                img.set(x, y, c * (0.6 + 0.3 * (y as f64 / 19.0)));
            }
        }
        let labels = segment_chromaticity(
            &img,
            &uniform_mask(40, 20),
            &SegmentationConfig {
                clusters: 2,
                min_segment_size: 4,
                seed: 3,
            },
        );
        assert_eq!(labels.distinct().len(), 2);
        // Each half is uniform in its label and differs from the other.
        let left = labels.get(0, 0);
        let right = labels.get(39, 19);
        assert_ne!(left, right);
        for y in 0..20 {
            for x in 0..40 {
                let expect = if x < 20 { left } else { right };
                assert_eq!(labels.get(x, y), expect, "at ({x},{y})");
            }
        }
    }

    #[test]
    fn segmentation_all_shadowed_gives_zero_labels() {
        let img = MultispectralImage::zeros(8, 8);
        let mask = PixelMask::new(8, 8, false);
        let labels = segment_chromaticity(&img, &mask, &SegmentationConfig::default());
        assert!(labels.labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn segmentation_is_seed_deterministic() {
        let mut img = MultispectralImage::zeros(30, 30);
        for y in 0..30 {
            for x in 0..30 {
                img.set(
                    x,
                    y,
                    Vector3::new(
                        0.2 + 0.6 * (x as f64 / 29.0),
                        0.3,
                        0.8 - 0.6 * (y as f64 / 29.0),
                    ),
                );
            }
        }
        let cfg = SegmentationConfig {
            clusters: 3,
            min_segment_size: 10,
            seed: 99,
        };
        let a = segment_chromaticity(&img, &uniform_mask(30, 30), &cfg);
        let b = segment_chromaticity(&img, &uniform_mask(30, 30), &cfg);
        assert_eq!(a, b);
    }

    #[test]
    fn min_size_merge_absorbs_small_segments() {
        // 100 red pixels and 3 slightly-off-red pixels: the small cluster
        // must merge into the large one.
        let mut img = MultispectralImage::zeros(103, 1);
        for x in 0..100 {
            img.set(x, 0, Vector3::new(0.8, 0.1, 0.1));
        }
        for x in 100..103 {
            img.set(x, 0, Vector3::new(0.75, 0.15, 0.1));
        }
        let labels = segment_chromaticity(
            &img,
            &uniform_mask(103, 1),
            &SegmentationConfig {
                clusters: 2,
                min_segment_size: 10,
                seed: 5,
            },
        );
        assert_eq!(labels.distinct(), vec![1]);
    }
}

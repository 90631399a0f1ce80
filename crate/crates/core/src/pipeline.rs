//! End-to-end reconstruction pipeline: ingest each keyframe, recover dense
//! normals, fuse, register against the global cloud and merge, writing
//! per-keyframe clouds, the global cloud and a metrics report.

use crate::fusion::{
    associate_normals, correct_normal_bias, densify, joint_optimize, transform_cloud_to_keyframe,
    FusionConfig,
};
use crate::geometry::CameraIntrinsics;
use crate::icp::{icp_register, merge_clouds, IcpConfig};
use crate::image::{normal_angle_errors_deg, percentile, NormalMap};
use crate::ingest::{
    backproject, depth_to_prior_normals, fill_holes_bilinear, invdepth_to_depth, rescale_depth,
};
use crate::io::bundle as bundle_io;
use crate::io::{ply, IoError};
use crate::kdtree::KdTree;
use crate::mps::{
    estimate_mixing, recover_normals, segment_chromaticity, shadow_mask, LabelMap, MixingConfig,
    MixingModel, SegmentationConfig,
};
use crate::cloud::PointCloud;
use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Soft per-keyframe wall-clock budget (milliseconds); exceeding it logs a
/// warning but never fails the run.
pub const KEYFRAME_BUDGET_MS: f64 = 2000.0;

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub bundle_dir: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Shadow threshold as a fraction of the image's maximum channel value.
    pub shadow_threshold_rel: f64,
    pub segmentation: SegmentationConfig,
    pub mixing: MixingConfig,
    /// Estimate the mixing matrices once and reuse them for every keyframe
    /// (matched by segment chromaticity) instead of re-estimating per
    /// keyframe.
    pub mixing_per_video: bool,
    pub fusion: FusionConfig,
    pub icp: IcpConfig,
    /// Voxel size for merge deduplication; non-positive disables dedup.
    pub merge_voxel: f64,
}

impl PipelineConfig {
    pub fn new(bundle_dir: PathBuf, output_dir: PathBuf) -> Self {
        Self {
            bundle_dir,
            output_dir,
            seed: 0,
            shadow_threshold_rel: 0.02,
            segmentation: SegmentationConfig::default(),
            mixing: MixingConfig::default(),
            mixing_per_video: false,
            fusion: FusionConfig::default(),
            icp: IcpConfig::default(),
            merge_voxel: 0.01,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct KeyframeTimings {
    pub ingest_ms: f64,
    pub mps_ms: f64,
    pub fusion_ms: f64,
    pub icp_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeyframeMetrics {
    pub id: u32,
    /// "ok" or "skipped: <reason>".
    pub status: String,
    pub semidense_points: usize,
    pub fused_points: usize,
    /// fused_points / semidense_points.
    pub density_ratio: f64,
    pub normal_mean_deg: Option<f64>,
    pub normal_median_deg: Option<f64>,
    pub position_rmse: Option<f64>,
    pub solver_iterations: usize,
    pub icp_fitness: Option<f64>,
    pub icp_rms: Option<f64>,
    pub icp_iterations: Option<usize>,
    pub timings_ms: KeyframeTimings,
}

impl KeyframeMetrics {
    fn skipped(id: u32, reason: String, semidense_points: usize) -> Self {
        Self {
            id,
            status: format!("skipped: {reason}"),
            semidense_points,
            fused_points: 0,
            density_ratio: 0.0,
            normal_mean_deg: None,
            normal_median_deg: None,
            position_rmse: None,
            solver_iterations: 0,
            icp_fitness: None,
            icp_rms: None,
            icp_iterations: None,
            timings_ms: KeyframeTimings::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct AggregateMetrics {
    pub keyframes_processed: usize,
    pub keyframes_skipped: usize,
    pub global_points: usize,
    pub mean_density_ratio: Option<f64>,
    pub mean_normal_mean_deg: Option<f64>,
    pub mean_normal_median_deg: Option<f64>,
    pub mean_position_rmse: Option<f64>,
    pub timings_ms: KeyframeTimings,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct MetricsReport {
    pub keyframes: Vec<KeyframeMetrics>,
    pub aggregate: AggregateMetrics,
    pub error: Option<String>,
}

impl MetricsReport {
    pub fn write(&self, path: &Path) -> Result<(), IoError> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }
}

/// Pairwise angular error statistics between two normal maps.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NormalErrorStats {
    pub mean_deg: f64,
    pub median_deg: f64,
    pub p95_deg: f64,
    pub compared_pixels: usize,
}

/// Angular errors between corresponding valid pixels of two normal maps.
pub fn evaluate_normal_maps(
    estimate: &NormalMap,
    truth: &NormalMap,
) -> Result<NormalErrorStats, PipelineError> {
    if (estimate.width, estimate.height) != (truth.width, truth.height) {
        return Err(PipelineError::DimensionMismatch(format!(
            "normal maps {}x{} vs {}x{}",
            estimate.width, estimate.height, truth.width, truth.height
        )));
    }
    let mut errors = normal_angle_errors_deg(estimate, truth);
    if errors.is_empty() {
        return Err(PipelineError::InvalidInput(
            "no overlapping valid pixels to compare".into(),
        ));
    }
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    let median = percentile(&mut errors, 50.0);
    let p95 = percentile(&mut errors, 95.0);
    Ok(NormalErrorStats {
        mean_deg: mean,
        median_deg: median,
        p95_deg: p95,
        compared_pixels: errors.len(),
    })
}

/// RMS nearest-neighbor distance from each cloud point to the ground-truth
/// cloud.
pub fn evaluate_cloud_rmse(cloud: &PointCloud, truth: &PointCloud) -> Result<f64, PipelineError> {
    if cloud.is_empty() || truth.is_empty() {
        return Err(PipelineError::InvalidInput(
            "cannot evaluate empty clouds".into(),
        ));
    }
    let gt_points: Vec<Vector3<f64>> = truth.points.iter().map(|p| p.position).collect();
    let tree = KdTree::build(&gt_points);
    let distances: Vec<f64> = cloud
        .points
        .par_iter()
        .map(|p| tree.nearest(&p.position).expect("truth nonempty").1)
        .collect();
    let sum: f64 = distances.iter().sum();
    Ok((sum / cloud.len() as f64).sqrt())
}

/// Reusable mixing matrices for per-video estimation: segment mean
/// chromaticity paired with the estimated matrix.
struct CachedMixing {
    entries: Vec<(Vector3<f64>, Matrix3<f64>)>,
}

fn segment_chromaticities(
    img: &crate::image::MultispectralImage,
    labels: &LabelMap,
) -> BTreeMap<u32, Vector3<f64>> {
    let mut sums: BTreeMap<u32, (Vector3<f64>, usize)> = BTreeMap::new();
    for y in 0..labels.height {
        for x in 0..labels.width {
            let l = labels.get(x, y);
            if l == 0 {
                continue;
            }
            let c = img.get(x, y);
            let total = c.sum();
            if total <= 0.0 {
                continue;
            }
            let entry = sums.entry(l).or_insert((Vector3::zeros(), 0));
            entry.0 += c / total;
            entry.1 += 1;
        }
    }
    sums.into_iter()
        .map(|(l, (s, n))| (l, s / n as f64))
        .collect()
}

struct KeyframeOutcome {
    metrics: KeyframeMetrics,
}

/// Runs the full reconstruction over a keyframe bundle directory, writing
/// `cloud_%06d.ply` per keyframe, `global.ply` and `metrics.json` into the
/// output directory.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<MetricsReport, PipelineError> {
    if !cfg.bundle_dir.is_dir() {
        return Err(PipelineError::InvalidInput(format!(
            "bundle directory {} does not exist",
            cfg.bundle_dir.display()
        )));
    }
    if !cfg.bundle_dir.join("poses.txt").exists() {
        return Err(PipelineError::InvalidInput(format!(
            "{} is not a keyframe bundle (missing poses.txt)",
            cfg.bundle_dir.display()
        )));
    }
    let records = bundle_io::list_keyframes(&cfg.bundle_dir)?;
    if records.is_empty() {
        return Err(PipelineError::InvalidInput(format!(
            "bundle {} lists no keyframes",
            cfg.bundle_dir.display()
        )));
    }
    let intr = bundle_io::read_intrinsics(&cfg.bundle_dir)?;
    let meta = bundle_io::read_meta(&cfg.bundle_dir)?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(IoError::from)?;

    let mut report = MetricsReport::default();
    let mut global_semidense = PointCloud::new();
    let mut global_fused = PointCloud::new();
    let mut cached_mixing: Option<CachedMixing> = None;

    for record in &records {
        let outcome = process_keyframe(
            cfg,
            record,
            &intr,
            &meta,
            &mut global_semidense,
            &mut global_fused,
            &mut cached_mixing,
        );
        match outcome {
            Ok(o) => report.keyframes.push(o.metrics),
            Err(KeyframeFailure {
                id,
                reason,
                semidense,
            }) => {
                log::warn!("keyframe {id}: skipped: {reason}");
                report
                    .keyframes
                    .push(KeyframeMetrics::skipped(id, reason, semidense));
            }
        }
    }

    ply::write_ply(&cfg.output_dir.join("global.ply"), &global_fused)?;
    report.aggregate = aggregate(&report.keyframes, global_fused.len());
    report.write(&cfg.output_dir.join("metrics.json"))?;
    Ok(report)
}

struct KeyframeFailure {
    id: u32,
    reason: String,
    semidense: usize,
}

#[allow(clippy::too_many_arguments)]
fn process_keyframe(
    cfg: &PipelineConfig,
    record: &bundle_io::PoseRecord,
    intr: &CameraIntrinsics,
    meta: &bundle_io::BundleMeta,
    global_semidense: &mut PointCloud,
    global_fused: &mut PointCloud,
    cached_mixing: &mut Option<CachedMixing>,
) -> Result<KeyframeOutcome, KeyframeFailure> {
    let id = record.id;
    let fail = |reason: String, semidense: usize| KeyframeFailure {
        id,
        reason,
        semidense,
    };
    let start = Instant::now();

    // --- ingest ---------------------------------------------------------
    let bundle = bundle_io::read_keyframe(&cfg.bundle_dir, record, intr, meta)
        .map_err(|e| fail(e.to_string(), 0))?;
    let depth_normalized = invdepth_to_depth(&bundle.inverse_depth);
    let semidense_points = depth_normalized.valid_count();
    if semidense_points == 0 {
        return Err(fail("no valid semi-dense depth".into(), 0));
    }
    let depth_metric = rescale_depth(&depth_normalized, bundle.scale)
        .map_err(|e| fail(e.to_string(), semidense_points))?;
    let filled = fill_holes_bilinear(&depth_metric)
        .map_err(|e| fail(e.to_string(), semidense_points))?;
    let priors = depth_to_prior_normals(&filled, intr);
    let metric_pose = bundle.metric_pose();

    let mut keyframe_semidense =
        backproject(&depth_metric, intr, &metric_pose);
    for p in &mut keyframe_semidense.points {
        p.keyframe_id = Some(id);
    }
    for p in &keyframe_semidense.points {
        global_semidense.push(*p);
    }
    let ingest_ms = start.elapsed().as_secs_f64() * 1000.0;

    // --- multispectral photometric stereo --------------------------------
    let t_mps = Instant::now();
    let shadow_threshold = cfg.shadow_threshold_rel * bundle.image.max_channel();
    let mask = shadow_mask(&bundle.image, shadow_threshold);

    let labels_file = bundle_io::labels_path(&cfg.bundle_dir, id);
    let labels = if labels_file.exists() {
        let mut user = bundle_io::read_labels(&labels_file)
            .map_err(|e| fail(e.to_string(), semidense_points))?;
        if (user.width, user.height) != (bundle.image.width, bundle.image.height) {
            return Err(fail(
                format!("labels_{id:06}.png dimensions do not match the image"),
                semidense_points,
            ));
        }
        // Shadowed pixels stay unlabeled regardless of the user map.
        for y in 0..user.height {
            for x in 0..user.width {
                if !mask.get(x, y) {
                    user.set(x, y, 0);
                }
            }
        }
        user
    } else {
        let seg_cfg = SegmentationConfig {
            seed: cfg.seed.wrapping_add(id as u64),
            ..cfg.segmentation
        };
        segment_chromaticity(&bundle.image, &mask, &seg_cfg)
    };

    let model: MixingModel = if cfg.mixing_per_video && cached_mixing.is_some() {
        let cache = cached_mixing.as_ref().unwrap();
        let chroma = segment_chromaticities(&bundle.image, &labels);
        let matched: Vec<(u32, Matrix3<f64>)> = chroma
            .iter()
            .map(|(&label, c)| {
                let best = cache
                    .entries
                    .iter()
                    .min_by(|(ca, _), (cb, _)| {
                        (ca - c)
                            .norm_squared()
                            .partial_cmp(&(cb - c).norm_squared())
                            .unwrap()
                    })
                    .expect("cache nonempty");
                (label, best.1)
            })
            .collect();
        MixingModel::from_matrices(labels.clone(), &matched, cfg.mixing.condition_threshold)
            .map_err(|e| fail(e.to_string(), semidense_points))?
    } else {
        let model = estimate_mixing(&bundle.image, &filled, intr, &priors, &labels, &cfg.mixing)
            .map_err(|e| fail(e.to_string(), semidense_points))?;
        if model.modeled_count() == 0 {
            let detail = model
                .failures()
                .iter()
                .map(|(l, f)| format!("segment {l}: {f:?}"))
                .collect::<Vec<_>>()
                .join("; ");
            return Err(fail(
                format!("no segment could be modeled ({detail})"),
                semidense_points,
            ));
        }
        if cfg.mixing_per_video {
            let chroma = segment_chromaticities(&bundle.image, &labels);
            let entries = model
                .modeled_labels()
                .into_iter()
                .filter_map(|l| Some((*chroma.get(&l)?, *model.matrix(l)?)))
                .collect();
            *cached_mixing = Some(CachedMixing { entries });
        }
        model
    };

    let recovered = recover_normals(&bundle.image, &model, &mask)
        .map_err(|e| fail(e.to_string(), semidense_points))?;
    if recovered.valid_count() == 0 {
        return Err(fail("recovered normal map is empty".into(), semidense_points));
    }
    let mps_ms = t_mps.elapsed().as_secs_f64() * 1000.0;

    // --- fusion -----------------------------------------------------------
    let t_fusion = Instant::now();
    let cloud_cam = transform_cloud_to_keyframe(global_semidense, &metric_pose);
    let cloud_cam = associate_normals(&cloud_cam, &recovered, intr);
    let surface = densify(&cloud_cam, &filled, &recovered, intr, &cfg.fusion)
        .map_err(|e| fail(e.to_string(), semidense_points))?;
    let surface = correct_normal_bias(&surface, &cfg.fusion);
    let (mut fused, solver_iterations) = joint_optimize(&surface, &cfg.fusion)
        .map_err(|e| fail(e.to_string(), semidense_points))?;

    // Attach colors and ids (point order mirrors valid_pixels()).
    let color_scale = bundle.image.max_channel().max(1e-12);
    for (point, (x, y)) in fused.points.iter_mut().zip(surface.valid_pixels()) {
        let c = bundle.image.get(x, y) / color_scale;
        point.color = Some([
            c.x.clamp(0.0, 1.0),
            c.y.clamp(0.0, 1.0),
            c.z.clamp(0.0, 1.0),
        ]);
        point.keyframe_id = Some(id);
    }
    // To world frame.
    for p in &mut fused.points {
        p.position = metric_pose.apply(p.position);
        p.normal = p.normal.map(|n| metric_pose.rotate(n));
    }
    let fused_points = fused.len();
    ply::write_ply(
        &cfg.output_dir.join(format!("cloud_{id:06}.ply")),
        &fused,
    )
    .map_err(|e| fail(e.to_string(), semidense_points))?;
    let fusion_ms = t_fusion.elapsed().as_secs_f64() * 1000.0;

    // --- registration and merge -------------------------------------------
    let t_icp = Instant::now();
    let (icp_fitness, icp_rms, icp_iterations) = if global_fused.is_empty() {
        *global_fused = fused.clone();
        (None, None, None)
    } else {
        match icp_register(&fused, global_fused, &cfg.icp) {
            Ok(reg) => {
                *global_fused = merge_clouds(global_fused, &fused, &reg, cfg.merge_voxel);
                (Some(reg.fitness), Some(reg.rms), Some(reg.iterations))
            }
            Err(e) => {
                log::warn!("keyframe {id}: registration failed ({e}); cloud not merged");
                (None, None, None)
            }
        }
    };
    let icp_ms = t_icp.elapsed().as_secs_f64() * 1000.0;

    // --- metrics -----------------------------------------------------------
    let gt_normals_file = bundle_io::gt_normals_path(&cfg.bundle_dir, id);
    let (normal_mean_deg, normal_median_deg) = if gt_normals_file.exists() {
        let gt = bundle_io::read_normals(&gt_normals_file)
            .map_err(|e| fail(e.to_string(), semidense_points))?;
        match evaluate_normal_maps(&recovered, &gt) {
            Ok(stats) => (Some(stats.mean_deg), Some(stats.median_deg)),
            Err(_) => (None, None),
        }
    } else {
        (None, None)
    };
    let gt_depth_file = bundle_io::gt_depth_path(&cfg.bundle_dir, id);
    let position_rmse = if gt_depth_file.exists() {
        let gt_depth = bundle_io::read_depth(&gt_depth_file)
            .map_err(|e| fail(e.to_string(), semidense_points))?;
        let gt_cloud = backproject(&gt_depth, intr, &metric_pose);
        evaluate_cloud_rmse(&fused, &gt_cloud).ok()
    } else {
        None
    };

    let total_ms = start.elapsed().as_secs_f64() * 1000.0;
    if total_ms > KEYFRAME_BUDGET_MS {
        log::warn!(
            "keyframe {id}: {total_ms:.0} ms exceeds the {KEYFRAME_BUDGET_MS:.0} ms budget"
        );
    }

    Ok(KeyframeOutcome {
        metrics: KeyframeMetrics {
            id,
            status: "ok".into(),
            semidense_points,
            fused_points,
            density_ratio: fused_points as f64 / semidense_points as f64,
            normal_mean_deg,
            normal_median_deg,
            position_rmse,
            solver_iterations,
            icp_fitness,
            icp_rms,
            icp_iterations,
            timings_ms: KeyframeTimings {
                ingest_ms,
                mps_ms,
                fusion_ms,
                icp_ms,
                total_ms,
            },
        },
    })
}

fn aggregate(keyframes: &[KeyframeMetrics], global_points: usize) -> AggregateMetrics {
    let ok: Vec<&KeyframeMetrics> = keyframes.iter().filter(|k| k.status == "ok").collect();
    let mean_of = |values: Vec<f64>| {
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    };
    AggregateMetrics {
        keyframes_processed: ok.len(),
        keyframes_skipped: keyframes.len() - ok.len(),
        global_points,
        mean_density_ratio: mean_of(ok.iter().map(|k| k.density_ratio).collect()),
        mean_normal_mean_deg: mean_of(ok.iter().filter_map(|k| k.normal_mean_deg).collect()),
        mean_normal_median_deg: mean_of(ok.iter().filter_map(|k| k.normal_median_deg).collect()),
        mean_position_rmse: mean_of(ok.iter().filter_map(|k| k.position_rmse).collect()),
        timings_ms: KeyframeTimings {
            ingest_ms: keyframes.iter().map(|k| k.timings_ms.ingest_ms).sum(),
            mps_ms: keyframes.iter().map(|k| k.timings_ms.mps_ms).sum(),
            fusion_ms: keyframes.iter().map(|k| k.timings_ms.fusion_ms).sum(),
            icp_ms: keyframes.iter().map(|k| k.timings_ms.icp_ms).sum(),
            total_ms: keyframes.iter().map(|k| k.timings_ms.total_ms).sum(),
        },
    }
}

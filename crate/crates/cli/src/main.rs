//! Command-line front end: synthetic bundle generation, reconstruction,
//! evaluation against ground truth and standalone registration.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

use chromafuse_core::fusion::FusionConfig;
use chromafuse_core::geometry::CameraIntrinsics;
use chromafuse_core::icp::{icp_register, merge_clouds, IcpConfig};
use chromafuse_core::io::bundle as bundle_io;
use chromafuse_core::io::ply;
use chromafuse_core::mps::{MixingConfig, SegmentationConfig};
use chromafuse_core::nalgebra::Vector3;
use chromafuse_core::pipeline::{
    evaluate_cloud_rmse, evaluate_normal_maps, run_pipeline, PipelineConfig,
};
use chromafuse_core::synth::{AlbedoLayout, BundleSpec, LightRig, SceneSpec, Shape};

#[derive(Parser)]
#[command(
    name = "chromafuse",
    about = "Densifies semi-dense SLAM reconstructions with multispectral photometric stereo",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic keyframe bundle with ground truth.
    Synth(SynthArgs),
    /// Run the full reconstruction pipeline over a keyframe bundle.
    Reconstruct(ReconstructArgs),
    /// Compare normal maps or point clouds against ground truth.
    Evaluate(EvaluateArgs),
    /// Register one point cloud onto another with trimmed ICP.
    Register(RegisterArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output bundle directory.
    #[arg(long)]
    out: PathBuf,
    /// Scene shape: sphere, plane or heightfield.
    #[arg(long, default_value = "sphere")]
    scene: String,
    #[arg(long, default_value_t = 1.0)]
    radius: f64,
    /// Heightfield relief amplitude.
    #[arg(long, default_value_t = 0.2)]
    amplitude: f64,
    /// Heightfield angular frequency.
    #[arg(long, default_value_t = 2.0)]
    frequency: f64,
    /// Uniform albedo as "r,g,b".
    #[arg(long, default_value = "0.9,0.9,0.9")]
    albedo: String,
    /// Second albedo; selecting it switches to the left/right split layout.
    #[arg(long)]
    albedo2: Option<String>,
    #[arg(long, default_value_t = 1)]
    keyframes: usize,
    #[arg(long, default_value_t = 5.0)]
    orbit_radius: f64,
    #[arg(long, default_value_t = 512)]
    image_size: usize,
    /// Focal length in pixels (both axes).
    #[arg(long, default_value_t = 640.0)]
    focal: f64,
    /// Image-gradient threshold for semi-dense pixel selection.
    #[arg(long, default_value_t = chromafuse_core::synth::DEFAULT_GRAD_THRESHOLD)]
    grad_threshold: f64,
    /// Inverse-depth noise sigma relative to the mean inverse depth.
    #[arg(long, default_value_t = chromafuse_core::synth::DEFAULT_NOISE_REL_SIGMA)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReconstructArgs {
    /// Keyframe bundle directory.
    #[arg(long)]
    bundle: PathBuf,
    /// Output directory for clouds and metrics.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Shadow threshold as a fraction of the maximum channel value.
    #[arg(long, default_value_t = 0.02)]
    shadow_threshold: f64,
    /// Number of chromaticity clusters (1 for single-material scenes).
    #[arg(long, default_value_t = 1)]
    clusters: usize,
    #[arg(long, default_value_t = 64)]
    min_segment_size: usize,
    /// Condition-number limit for mixing matrices.
    #[arg(long, default_value_t = 1e6)]
    cond_threshold: f64,
    /// Use hole-filled priors in mixing estimation too.
    #[arg(long, default_value_t = false)]
    include_interpolated: bool,
    /// Estimate the mixing once and reuse it for all keyframes.
    #[arg(long, default_value_t = false)]
    mixing_per_video: bool,
    #[arg(long, default_value_t = 1.0)]
    weight_position: f64,
    #[arg(long, default_value_t = 3.0)]
    weight_normal: f64,
    /// Boxcar radius (pixels) for the low-frequency normal correction.
    #[arg(long, default_value_t = 7)]
    smoothing_radius: usize,
    #[arg(long, default_value_t = 1e-8)]
    solver_tol: f64,
    #[arg(long, default_value_t = 2000)]
    solver_max_iters: usize,
    #[arg(long, default_value_t = 50)]
    icp_max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    icp_convergence: f64,
    /// Maximum correspondence distance in scene units ("inf" accepted).
    #[arg(long, default_value_t = f64::INFINITY)]
    icp_max_dist: f64,
    #[arg(long, default_value_t = 0.1)]
    icp_trim: f64,
    #[arg(long, default_value_t = 0.3)]
    icp_min_fitness: f64,
    /// Merge deduplication voxel size in scene units (<= 0 disables).
    #[arg(long, default_value_t = 0.01)]
    voxel: f64,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Recovered normal map (3-channel PFM).
    #[arg(long, requires = "gt_normals")]
    normals: Option<PathBuf>,
    /// Ground-truth normal map (3-channel PFM).
    #[arg(long)]
    gt_normals: Option<PathBuf>,
    /// Reconstructed cloud (PLY).
    #[arg(long, requires = "gt_cloud")]
    cloud: Option<PathBuf>,
    /// Ground-truth cloud (PLY).
    #[arg(long)]
    gt_cloud: Option<PathBuf>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RegisterArgs {
    /// Source cloud (PLY), registered onto the target.
    #[arg(long)]
    source: PathBuf,
    /// Target cloud (PLY).
    #[arg(long)]
    target: PathBuf,
    #[arg(long, default_value_t = 50)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    convergence: f64,
    #[arg(long, default_value_t = f64::INFINITY)]
    max_dist: f64,
    #[arg(long, default_value_t = 0.1)]
    trim: f64,
    #[arg(long, default_value_t = 0.3)]
    min_fitness: f64,
    /// Write the registration report (JSON) here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the merged cloud here.
    #[arg(long)]
    merged: Option<PathBuf>,
    /// Voxel size for merge deduplication.
    #[arg(long, default_value_t = 0.01)]
    voxel: f64,
}

fn parse_rgb(text: &str) -> Result<Vector3<f64>> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("cannot parse color {text:?}"))?;
    if parts.len() != 3 || parts.iter().any(|v| !(0.0..=1.0).contains(v)) {
        bail!("color must be three comma-separated values in [0,1], got {text:?}");
    }
    Ok(Vector3::new(parts[0], parts[1], parts[2]))
}

fn run_synth(args: &SynthArgs) -> Result<()> {
    let albedo = parse_rgb(&args.albedo)?;
    let layout = match &args.albedo2 {
        Some(second) => AlbedoLayout::SplitX {
            left: albedo,
            right: parse_rgb(second)?,
        },
        None => AlbedoLayout::Uniform(albedo),
    };
    let shape = match args.scene.as_str() {
        "sphere" => Shape::Sphere {
            center: Vector3::zeros(),
            radius: args.radius,
        },
        "plane" => Shape::Plane {
            point: Vector3::zeros(),
            normal: Vector3::new(0.0, 0.0, 1.0),
        },
        "heightfield" => Shape::Heightfield {
            amplitude: args.amplitude,
            frequency: args.frequency,
        },
        other => bail!("unknown scene {other:?} (expected sphere|plane|heightfield)"),
    };
    let half = args.image_size as f64 / 2.0;
    let spec = BundleSpec {
        scene: SceneSpec {
            shape,
            albedo: layout,
        },
        rig: LightRig::default_rig(),
        intrinsics: CameraIntrinsics::new(
            args.focal,
            args.focal,
            half,
            half,
            args.image_size,
            args.image_size,
        )?,
        keyframes: args.keyframes,
        orbit_radius: args.orbit_radius,
        target: Vector3::zeros(),
        grad_threshold: args.grad_threshold,
        noise_rel_sigma: args.noise,
        seed: args.seed,
    };
    let generated = chromafuse_core::synth::generate_bundle(&spec, &args.out)?;
    for g in &generated {
        println!(
            "keyframe {}: {} semi-dense pixels ({:.1}% of surface), scale {:.4}",
            g.id,
            g.semidense_count,
            100.0 * g.semidense_fraction,
            g.scale
        );
    }
    println!("bundle written to {}", args.out.display());
    Ok(())
}

fn run_reconstruct(args: &ReconstructArgs) -> Result<()> {
    let cfg = PipelineConfig {
        bundle_dir: args.bundle.clone(),
        output_dir: args.out.clone(),
        seed: args.seed,
        shadow_threshold_rel: args.shadow_threshold,
        segmentation: SegmentationConfig {
            clusters: args.clusters,
            min_segment_size: args.min_segment_size,
            seed: args.seed,
        },
        mixing: MixingConfig {
            condition_threshold: args.cond_threshold,
            exclude_interpolated: !args.include_interpolated,
            ..MixingConfig::default()
        },
        mixing_per_video: args.mixing_per_video,
        fusion: FusionConfig {
            weight_position: args.weight_position,
            weight_normal: args.weight_normal,
            smoothing_radius: args.smoothing_radius,
            solver_tolerance: args.solver_tol,
            max_iterations: args.solver_max_iters,
            ..FusionConfig::default()
        },
        icp: IcpConfig {
            max_iterations: args.icp_max_iter,
            convergence_threshold: args.icp_convergence,
            max_correspondence_distance: args.icp_max_dist,
            trim_fraction: args.icp_trim,
            min_overlap_fitness: args.icp_min_fitness,
        },
        merge_voxel: args.voxel,
    };
    match run_pipeline(&cfg) {
        Ok(report) => {
            for k in &report.keyframes {
                println!(
                    "keyframe {}: {} ({} semi-dense -> {} fused, density x{:.1}, {:.0} ms)",
                    k.id,
                    k.status,
                    k.semidense_points,
                    k.fused_points,
                    k.density_ratio,
                    k.timings_ms.total_ms
                );
            }
            println!(
                "global cloud: {} points ({} keyframes ok, {} skipped)",
                report.aggregate.global_points,
                report.aggregate.keyframes_processed,
                report.aggregate.keyframes_skipped
            );
            println!("metrics written to {}", args.out.join("metrics.json").display());
            Ok(())
        }
        Err(err) => {
            // Leave a machine-readable error record next to any artifacts.
            if std::fs::create_dir_all(&args.out).is_ok() {
                let record = serde_json::json!({
                    "keyframes": [],
                    "error": err.to_string(),
                });
                let _ = std::fs::write(
                    args.out.join("metrics.json"),
                    serde_json::to_string_pretty(&record)?,
                );
            }
            Err(err.into())
        }
    }
}

fn run_evaluate(args: &EvaluateArgs) -> Result<()> {
    let mut report = serde_json::Map::new();
    if args.normals.is_none() && args.cloud.is_none() {
        bail!("nothing to evaluate: pass --normals/--gt-normals and/or --cloud/--gt-cloud");
    }
    if let (Some(est), Some(truth)) = (&args.normals, &args.gt_normals) {
        let est = bundle_io::read_normals(est)?;
        let truth = bundle_io::read_normals(truth)?;
        let stats = evaluate_normal_maps(&est, &truth)?;
        report.insert("normals".into(), serde_json::to_value(stats)?);
    }
    if let (Some(cloud), Some(truth)) = (&args.cloud, &args.gt_cloud) {
        let cloud = ply::read_ply(cloud)?;
        let truth = ply::read_ply(truth)?;
        let rmse = evaluate_cloud_rmse(&cloud, &truth)?;
        report.insert(
            "cloud".into(),
            serde_json::json!({ "position_rmse": rmse, "points": cloud.len() }),
        );
    }
    let text = serde_json::to_string_pretty(&serde_json::Value::Object(report))?;
    match &args.out {
        Some(path) => std::fs::write(path, text)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn run_register(args: &RegisterArgs) -> Result<()> {
    let source = ply::read_ply(&args.source)?;
    let target = ply::read_ply(&args.target)?;
    let cfg = IcpConfig {
        max_iterations: args.max_iter,
        convergence_threshold: args.convergence,
        max_correspondence_distance: args.max_dist,
        trim_fraction: args.trim,
        min_overlap_fitness: args.min_fitness,
    };
    let reg = icp_register(&source, &target, &cfg)?;
    let r = &reg.transform.rotation;
    let report = serde_json::json!({
        "rotation": [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
        ],
        "translation": [
            reg.transform.translation.x,
            reg.transform.translation.y,
            reg.transform.translation.z,
        ],
        "rotation_angle_deg": reg.transform.rotation_angle_deg(),
        "fitness": reg.fitness,
        "rms": reg.rms,
        "iterations": reg.iterations,
    });
    let text = serde_json::to_string_pretty(&report)?;
    match &args.out {
        Some(path) => std::fs::write(path, text)?,
        None => println!("{text}"),
    }
    if let Some(merged_path) = &args.merged {
        let merged = merge_clouds(&target, &source, &reg, args.voxel);
        ply::write_ply(merged_path, &merged)?;
        println!("merged cloud written to {}", merged_path.display());
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(args) => run_synth(args),
        Command::Reconstruct(args) => run_reconstruct(args),
        Command::Evaluate(args) => run_evaluate(args),
        Command::Register(args) => run_register(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

//! Keyframe bundle directory layout.
//!
//! ```text
//! bundle/
//!   intrinsics.json        fx, fy, cx, cy, width, height
//!   poses.txt              one line per keyframe: id tx ty tz qx qy qz qw s
//!   bundle_meta.json       image quantization scale + per-keyframe stats
//!   image_%06d.png         8-bit RGB, linear values (radiance = value / scale)
//!   invdepth_%06d.pfm      32-bit float inverse depth, NaN = missing
//!   labels_%06d.png        optional 16-bit integer segment labels
//!   gt/                    optional ground truth
//!     depth_%06d.pfm       exact metric depth, 0 = invalid
//!     normals_%06d.pfm     3-channel exact camera-frame normals, NaN = invalid
//!     mixing.json          exact mixing matrix per albedo region
//! ```

use crate::geometry::{CameraIntrinsics, CameraPose};
use crate::image::{DepthMap, InverseDepthMap, MultispectralImage, NormalMap};
use crate::ingest::KeyframeBundle;
use crate::mps::LabelMap;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

use super::pfm::{read_pfm, write_pfm, PfmData};
use super::IoError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeyframeStats {
    pub id: u32,
    /// Number of pixels carrying a semi-dense inverse depth value.
    pub semidense_count: usize,
    /// Fraction of valid ground-truth depth pixels that are semi-dense.
    pub semidense_fraction: f64,
}

/// Bundle-level metadata: the 8-bit image quantization scale
/// (`radiance = png_value / image_scale`) and generator statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleMeta {
    pub image_scale: f64,
    #[serde(default)]
    pub keyframes: Vec<KeyframeStats>,
}

impl Default for BundleMeta {
    fn default() -> Self {
        Self {
            image_scale: 255.0,
            keyframes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixingRegion {
    pub region: usize,
    /// Row-major 3x3 mixing matrix.
    pub m: [[f64; 3]; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixingGroundTruth {
    pub regions: Vec<MixingRegion>,
}

impl MixingGroundTruth {
    pub fn matrix(&self, region: usize) -> Option<Matrix3<f64>> {
        self.regions.iter().find(|r| r.region == region).map(|r| {
            Matrix3::from_fn(|i, j| r.m[i][j])
        })
    }
}

pub fn image_path(dir: &Path, id: u32) -> PathBuf {
    dir.join(format!("image_{id:06}.png"))
}

pub fn invdepth_path(dir: &Path, id: u32) -> PathBuf {
    dir.join(format!("invdepth_{id:06}.pfm"))
}

pub fn labels_path(dir: &Path, id: u32) -> PathBuf {
    dir.join(format!("labels_{id:06}.png"))
}

pub fn gt_depth_path(dir: &Path, id: u32) -> PathBuf {
    dir.join("gt").join(format!("depth_{id:06}.pfm"))
}

pub fn gt_normals_path(dir: &Path, id: u32) -> PathBuf {
    dir.join("gt").join(format!("normals_{id:06}.pfm"))
}

pub fn gt_mixing_path(dir: &Path) -> PathBuf {
    dir.join("gt").join("mixing.json")
}

/// One parsed line of poses.txt.
#[derive(Debug, Clone, Copy)]
pub struct PoseRecord {
    pub id: u32,
    pub pose: CameraPose,
}

pub fn write_intrinsics(dir: &Path, intr: &CameraIntrinsics) -> Result<(), IoError> {
    let json = serde_json::to_string_pretty(intr)?;
    fs::write(dir.join("intrinsics.json"), json)?;
    Ok(())
}

pub fn read_intrinsics(dir: &Path) -> Result<CameraIntrinsics, IoError> {
    let text = fs::read_to_string(dir.join("intrinsics.json"))?;
    let intr: CameraIntrinsics = serde_json::from_str(&text)?;
    CameraIntrinsics::new(intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height)
        .map_err(|e| IoError::Format(format!("intrinsics.json: {e}")))
}

/// Writes poses.txt: `id tx ty tz qx qy qz qw s`, camera-to-world.
pub fn write_poses(dir: &Path, records: &[PoseRecord]) -> Result<(), IoError> {
    let mut text = String::new();
    for r in records {
        let t = r.pose.translation();
        let rot = r.pose.rotation();
        let q = rot.quaternion();
        text.push_str(&format!(
            "{} {} {} {} {} {} {} {} {}\n",
            r.id, t.x, t.y, t.z, q.i, q.j, q.k, q.w, r.pose.scale()
        ));
    }
    fs::write(dir.join("poses.txt"), text)?;
    Ok(())
}

pub fn read_poses(dir: &Path) -> Result<Vec<PoseRecord>, IoError> {
    let text = fs::read_to_string(dir.join("poses.txt"))?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 9 {
            return Err(IoError::Format(format!(
                "poses.txt line {}: expected 9 fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let num = |i: usize| -> Result<f64, IoError> {
            fields[i]
                .parse()
                .map_err(|_| IoError::Format(format!("poses.txt line {}: bad number", lineno + 1)))
        };
        let id: u32 = fields[0].parse().map_err(|_| {
            IoError::Format(format!("poses.txt line {}: bad keyframe id", lineno + 1))
        })?;
        let (tx, ty, tz) = (num(1)?, num(2)?, num(3)?);
        let (qx, qy, qz, qw) = (num(4)?, num(5)?, num(6)?, num(7)?);
        let s = num(8)?;
        let pose = CameraPose::new([qw, qx, qy, qz], Vector3::new(tx, ty, tz), s)
            .map_err(|e| IoError::Format(format!("poses.txt line {}: {e}", lineno + 1)))?;
        records.push(PoseRecord { id, pose });
    }
    Ok(records)
}

pub fn write_meta(dir: &Path, meta: &BundleMeta) -> Result<(), IoError> {
    let json = serde_json::to_string_pretty(meta)?;
    fs::write(dir.join("bundle_meta.json"), json)?;
    Ok(())
}

pub fn read_meta(dir: &Path) -> Result<BundleMeta, IoError> {
    let path = dir.join("bundle_meta.json");
    if !path.exists() {
        return Ok(BundleMeta::default());
    }
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Quantizes a radiance image to 8-bit with the given scale and writes PNG.
pub fn write_image_png(path: &Path, img: &MultispectralImage, scale: f64) -> Result<(), IoError> {
    let mut buf = image::RgbImage::new(img.width as u32, img.height as u32);
    for y in 0..img.height {
        for x in 0..img.width {
            let c = img.get(x, y);
            let q = |v: f64| (v * scale).round().clamp(0.0, 255.0) as u8;
            buf.put_pixel(x as u32, y as u32, image::Rgb([q(c.x), q(c.y), q(c.z)]));
        }
    }
    buf.save(path)?;
    Ok(())
}

pub fn read_image_png(path: &Path, scale: f64) -> Result<MultispectralImage, IoError> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = MultispectralImage::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            out.set(
                x,
                y,
                Vector3::new(
                    p[0] as f64 / scale,
                    p[1] as f64 / scale,
                    p[2] as f64 / scale,
                ),
            );
        }
    }
    Ok(out)
}

pub fn write_invdepth(path: &Path, idmap: &InverseDepthMap) -> Result<(), IoError> {
    let data: Vec<f32> = idmap
        .values()
        .iter()
        .map(|v| v.map_or(f32::NAN, |d| d as f32))
        .collect();
    write_pfm(
        path,
        &PfmData {
            width: idmap.width,
            height: idmap.height,
            channels: 1,
            data,
        },
    )
}

pub fn read_invdepth(path: &Path) -> Result<InverseDepthMap, IoError> {
    let pfm = read_pfm(path)?;
    if pfm.channels != 1 {
        return Err(IoError::Format(format!(
            "{}: expected grayscale pfm",
            path.display()
        )));
    }
    let values = pfm
        .data
        .iter()
        .map(|&v| (!v.is_nan()).then_some(v as f64))
        .collect();
    Ok(InverseDepthMap::from_vec(pfm.width, pfm.height, values))
}

pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<(), IoError> {
    let data: Vec<f32> = depth.depths().iter().map(|&d| d as f32).collect();
    write_pfm(
        path,
        &PfmData {
            width: depth.width,
            height: depth.height,
            channels: 1,
            data,
        },
    )
}

pub fn read_depth(path: &Path) -> Result<DepthMap, IoError> {
    let pfm = read_pfm(path)?;
    if pfm.channels != 1 {
        return Err(IoError::Format(format!(
            "{}: expected grayscale pfm",
            path.display()
        )));
    }
    let mut out = DepthMap::invalid(pfm.width, pfm.height);
    for y in 0..pfm.height {
        for x in 0..pfm.width {
            let v = pfm.data[y * pfm.width + x] as f64;
            if v.is_finite() && v > 0.0 {
                out.set(x, y, v);
            }
        }
    }
    Ok(out)
}

pub fn write_normals(path: &Path, normals: &NormalMap) -> Result<(), IoError> {
    let mut data = vec![f32::NAN; normals.width * normals.height * 3];
    for y in 0..normals.height {
        for x in 0..normals.width {
            if let Some(n) = normals.get(x, y) {
                let i = (y * normals.width + x) * 3;
                data[i] = n.x as f32;
                data[i + 1] = n.y as f32;
                data[i + 2] = n.z as f32;
            }
        }
    }
    write_pfm(
        path,
        &PfmData {
            width: normals.width,
            height: normals.height,
            channels: 3,
            data,
        },
    )
}

pub fn read_normals(path: &Path) -> Result<NormalMap, IoError> {
    let pfm = read_pfm(path)?;
    if pfm.channels != 3 {
        return Err(IoError::Format(format!(
            "{}: expected 3-channel pfm",
            path.display()
        )));
    }
    let mut out = NormalMap::invalid(pfm.width, pfm.height);
    for y in 0..pfm.height {
        for x in 0..pfm.width {
            let i = (y * pfm.width + x) * 3;
            let n = Vector3::new(
                pfm.data[i] as f64,
                pfm.data[i + 1] as f64,
                pfm.data[i + 2] as f64,
            );
            if n.iter().all(|v| v.is_finite()) && n.norm() > 1e-9 {
                out.set(x, y, n);
            }
        }
    }
    Ok(out)
}

/// Writes a 16-bit label image.
pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<(), IoError> {
    let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(
        labels.width as u32,
        labels.height as u32,
    );
    for y in 0..labels.height {
        for x in 0..labels.width {
            let l = labels.get(x, y);
            if l > u16::MAX as u32 {
                return Err(IoError::Format(format!(
                    "label {l} does not fit a 16-bit image"
                )));
            }
            buf.put_pixel(x as u32, y as u32, image::Luma([l as u16]));
        }
    }
    buf.save(path)?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<LabelMap, IoError> {
    let img = image::open(path)?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = LabelMap::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            out.set(x, y, img.get_pixel(x as u32, y as u32)[0] as u32);
        }
    }
    Ok(out)
}

pub fn write_mixing_gt(dir: &Path, gt: &MixingGroundTruth) -> Result<(), IoError> {
    let json = serde_json::to_string_pretty(gt)?;
    fs::write(gt_mixing_path(dir), json)?;
    Ok(())
}

pub fn read_mixing_gt(dir: &Path) -> Result<MixingGroundTruth, IoError> {
    let text = fs::read_to_string(gt_mixing_path(dir))?;
    Ok(serde_json::from_str(&text)?)
}

/// Keyframe ids present in the bundle, in poses.txt order.
pub fn list_keyframes(dir: &Path) -> Result<Vec<PoseRecord>, IoError> {
    if !dir.join("poses.txt").exists() {
        return Err(IoError::Format(format!(
            "{}: not a keyframe bundle (missing poses.txt)",
            dir.display()
        )));
    }
    read_poses(dir)
}

/// Loads one keyframe worth of inputs.
pub fn read_keyframe(
    dir: &Path,
    record: &PoseRecord,
    intr: &CameraIntrinsics,
    meta: &BundleMeta,
) -> Result<KeyframeBundle, IoError> {
    let image = read_image_png(&image_path(dir, record.id), meta.image_scale)?;
    let inverse_depth = read_invdepth(&invdepth_path(dir, record.id))?;
    let bundle = KeyframeBundle {
        id: record.id,
        image,
        inverse_depth,
        pose: record.pose,
        scale: record.pose.scale(),
        intrinsics: *intr,
    };
    bundle
        .check()
        .map_err(|e| IoError::Format(e.to_string()))?;
    Ok(bundle)
}

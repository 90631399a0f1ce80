//! Per-pixel grid containers shared by every pipeline stage.
//!
//! All grids are row-major with `index = y * width + x`; pixel (0, 0) is the
//! top-left corner. Invalid depth is encoded as 0 alongside an explicit
//! validity mask, so downstream code never compares floats against the
//! sentinel.

use nalgebra::Vector3;

/// Boolean per-pixel mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    pub width: usize,
    pub height: usize,
    data: Vec<bool>,
}

impl PixelMask {
    pub fn new(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), width * height);
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }
}

/// H x W x 3 linear-radiance image; one channel per colored light.
#[derive(Debug, Clone, PartialEq)]
pub struct MultispectralImage {
    pub width: usize,
    pub height: usize,
    data: Vec<Vector3<f64>>,
}

impl MultispectralImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![Vector3::zeros(); width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<Vector3<f64>>) -> Self {
        assert_eq!(data.len(), width * height);
        debug_assert!(data.iter().all(|c| c.iter().all(|&v| v >= 0.0)));
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Vector3<f64> {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: Vector3<f64>) {
        debug_assert!(c.iter().all(|&v| v >= 0.0));
        self.data[y * self.width + x] = c;
    }

    pub fn pixels(&self) -> &[Vector3<f64>] {
        &self.data
    }

    /// Largest channel value over the whole image.
    pub fn max_channel(&self) -> f64 {
        self.data
            .iter()
            .flat_map(|c| c.iter().copied())
            .fold(0.0, f64::max)
    }

    /// Scales every channel by a non-negative constant.
    pub fn scaled(&self, factor: f64) -> Self {
        assert!(factor >= 0.0);
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|c| c * factor).collect(),
        }
    }
}

/// Per-pixel depth in scene units. Invalid pixels carry exactly 0.
///
/// `interpolated` marks pixels whose value came from hole filling rather
/// than from a measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    depth: Vec<f64>,
    valid: Vec<bool>,
    interpolated: Vec<bool>,
}

impl DepthMap {
    pub fn invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            depth: vec![0.0; width * height],
            valid: vec![false; width * height],
            interpolated: vec![false; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.valid[i].then_some(self.depth[i])
    }

    #[inline]
    pub fn raw(&self, x: usize, y: usize) -> f64 {
        self.depth[y * self.width + x]
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    #[inline]
    pub fn is_interpolated(&self, x: usize, y: usize) -> bool {
        self.interpolated[y * self.width + x]
    }

    /// Stores a measured (non-interpolated) depth. Must be positive.
    #[inline]
    pub fn set(&mut self, x: usize, y: usize, depth: f64) {
        debug_assert!(depth > 0.0);
        let i = y * self.width + x;
        self.depth[i] = depth;
        self.valid[i] = true;
        self.interpolated[i] = false;
    }

    /// Stores a hole-filled depth and flags it as interpolated.
    #[inline]
    pub fn set_interpolated(&mut self, x: usize, y: usize, depth: f64) {
        debug_assert!(depth > 0.0);
        let i = y * self.width + x;
        self.depth[i] = depth;
        self.valid[i] = true;
        self.interpolated[i] = true;
    }

    /// Marks a pixel invalid, restoring the 0 sentinel.
    #[inline]
    pub fn clear(&mut self, x: usize, y: usize) {
        let i = y * self.width + x;
        self.depth[i] = 0.0;
        self.valid[i] = false;
        self.interpolated[i] = false;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn depths(&self) -> &[f64] {
        &self.depth
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }
}

/// Per-pixel inverse depth (1/scene-units). `None` encodes a missing value;
/// stored numbers may be negative (invalid SLAM estimates) — extraction
/// decides what to do with them.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseDepthMap {
    pub width: usize,
    pub height: usize,
    values: Vec<Option<f64>>,
}

impl InverseDepthMap {
    pub fn missing(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![None; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, values: Vec<Option<f64>>) -> Self {
        assert_eq!(values.len(), width * height);
        Self {
            width,
            height,
            values,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: Option<f64>) {
        self.values[y * self.width + x] = v;
    }

    pub fn values(&self) -> &[Option<f64>] {
        &self.values
    }

    pub fn present_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }
}

/// Per-pixel unit surface normals in the camera frame.
///
/// `interpolated` marks normals whose finite-difference stencil touched
/// hole-filled depth values.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap {
    pub width: usize,
    pub height: usize,
    normals: Vec<Vector3<f64>>,
    valid: Vec<bool>,
    interpolated: Vec<bool>,
}

impl NormalMap {
    pub fn invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            normals: vec![Vector3::zeros(); width * height],
            valid: vec![false; width * height],
            interpolated: vec![false; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<Vector3<f64>> {
        let i = y * self.width + x;
        self.valid[i].then_some(self.normals[i])
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    #[inline]
    pub fn is_interpolated(&self, x: usize, y: usize) -> bool {
        self.interpolated[y * self.width + x]
    }

    /// Stores a normal, normalizing it to unit length.
    #[inline]
    pub fn set(&mut self, x: usize, y: usize, n: Vector3<f64>) {
        let norm = n.norm();
        debug_assert!(norm > 0.0, "cannot store a zero normal");
        let i = y * self.width + x;
        self.normals[i] = n / norm;
        self.valid[i] = true;
    }

    #[inline]
    pub fn set_interpolated_flag(&mut self, x: usize, y: usize, flag: bool) {
        self.interpolated[y * self.width + x] = flag;
    }

    #[inline]
    pub fn clear(&mut self, x: usize, y: usize) {
        let i = y * self.width + x;
        self.normals[i] = Vector3::zeros();
        self.valid[i] = false;
        self.interpolated[i] = false;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn normals(&self) -> &[Vector3<f64>] {
        &self.normals
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }
}

/// Mean angle in degrees between corresponding valid normals, with the
/// per-pixel angles returned for percentile statistics.
pub fn normal_angle_errors_deg(a: &NormalMap, b: &NormalMap) -> Vec<f64> {
    assert_eq!((a.width, a.height), (b.width, b.height));
    let mut out = Vec::new();
    for y in 0..a.height {
        for x in 0..a.width {
            if let (Some(na), Some(nb)) = (a.get(x, y), b.get(x, y)) {
                let dot = na.dot(&nb).clamp(-1.0, 1.0);
                out.push(dot.acos().to_degrees());
            }
        }
    }
    out
}

/// Percentile (0..=100) of a sample set by linear interpolation.
pub fn percentile(samples: &mut [f64], p: f64) -> f64 {
    assert!(!samples.is_empty());
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = (p / 100.0) * (samples.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    samples[lo] * (1.0 - frac) + samples[hi] * frac
}

//! Point clouds: positions with optional unit normals, colors and source
//! keyframe ids.

use nalgebra::Vector3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloudPoint {
    pub position: Vector3<f64>,
    /// Unit surface normal, when one has been associated.
    pub normal: Option<Vector3<f64>>,
    /// RGB color in [0, 1].
    pub color: Option<[f64; 3]>,
    /// Keyframe the point originated from.
    pub keyframe_id: Option<u32>,
}

impl CloudPoint {
    pub fn new(position: Vector3<f64>) -> Self {
        Self {
            position,
            normal: None,
            color: None,
            keyframe_id: None,
        }
    }

    pub fn with_normal(mut self, normal: Vector3<f64>) -> Self {
        self.normal = Some(normal.normalize());
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<CloudPoint>,
}

impl PointCloud {
    pub fn new() -> Self {
        Self { points: Vec::new() }
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            points: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn push(&mut self, point: CloudPoint) {
        self.points.push(point);
    }

    pub fn positions(&self) -> impl Iterator<Item = &Vector3<f64>> {
        self.points.iter().map(|p| &p.position)
    }

    /// Checks the container invariants: finite positions, unit normals.
    pub fn validate(&self) -> Result<(), String> {
        for (i, p) in self.points.iter().enumerate() {
            if !p.position.iter().all(|v| v.is_finite()) {
                return Err(format!("point {i} has a non-finite position"));
            }
            if let Some(n) = p.normal {
                if (n.norm() - 1.0).abs() > 1e-6 {
                    return Err(format!("point {i} normal has norm {}", n.norm()));
                }
            }
            if let Some(c) = p.color {
                if c.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                    return Err(format!("point {i} color outside [0,1]"));
                }
            }
        }
        Ok(())
    }
}

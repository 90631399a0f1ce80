//! ASCII PLY point-cloud writer and a reader for the subset this pipeline
//! emits: `x y z nx ny nz red green blue`, normals zeroed where absent.

use crate::cloud::{CloudPoint, PointCloud};
use nalgebra::Vector3;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::IoError;

pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<(), IoError> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "comment normals zeroed where absent")?;
    writeln!(w, "element vertex {}", cloud.len())?;
    writeln!(w, "property float x")?;
    writeln!(w, "property float y")?;
    writeln!(w, "property float z")?;
    writeln!(w, "property float nx")?;
    writeln!(w, "property float ny")?;
    writeln!(w, "property float nz")?;
    writeln!(w, "property uchar red")?;
    writeln!(w, "property uchar green")?;
    writeln!(w, "property uchar blue")?;
    writeln!(w, "end_header")?;
    for p in &cloud.points {
        let n = p.normal.unwrap_or_else(Vector3::zeros);
        let c = p.color.unwrap_or([1.0, 1.0, 1.0]);
        let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        writeln!(
            w,
            "{} {} {} {} {} {} {} {} {}",
            p.position.x,
            p.position.y,
            p.position.z,
            n.x,
            n.y,
            n.z,
            to_u8(c[0]),
            to_u8(c[1]),
            to_u8(c[2]),
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ply(path: &Path) -> Result<PointCloud, IoError> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let bad = |msg: &str| IoError::Format(format!("{}: {msg}", path.display()));

    match lines.next().transpose()? {
        Some(l) if l.trim() == "ply" => {}
        _ => return Err(bad("missing ply magic")),
    }

    let mut vertex_count = 0usize;
    let mut properties: Vec<String> = Vec::new();
    loop {
        let Some(line) = lines.next().transpose()? else {
            return Err(bad("header without end_header"));
        };
        let line = line.trim().to_string();
        if line == "end_header" {
            break;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["format", "ascii", _] | ["comment", ..] => {}
            ["format", ..] => return Err(bad("only ascii ply is supported")),
            ["element", "vertex", n] => {
                vertex_count = n.parse().map_err(|_| bad("bad vertex count"))?
            }
            ["element", ..] => return Err(bad("unsupported element")),
            ["property", _, name] => properties.push((*name).to_string()),
            ["property", ..] => return Err(bad("unsupported property declaration")),
            _ => return Err(bad("unrecognized header line")),
        }
    }

    let idx =
        |name: &str| -> Option<usize> { properties.iter().position(|p| p == name) };
    let (Some(ix), Some(iy), Some(iz)) = (idx("x"), idx("y"), idx("z")) else {
        return Err(bad("missing x/y/z properties"));
    };
    let normal_idx = match (idx("nx"), idx("ny"), idx("nz")) {
        (Some(a), Some(b), Some(c)) => Some((a, b, c)),
        _ => None,
    };
    let color_idx = match (idx("red"), idx("green"), idx("blue")) {
        (Some(a), Some(b), Some(c)) => Some((a, b, c)),
        _ => None,
    };

    let mut cloud = PointCloud::with_capacity(vertex_count);
    for _ in 0..vertex_count {
        let Some(line) = lines.next().transpose()? else {
            return Err(bad("fewer vertices than declared"));
        };
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad("bad vertex line"))?;
        if vals.len() < properties.len() {
            return Err(bad("short vertex line"));
        }
        let mut point = CloudPoint::new(Vector3::new(vals[ix], vals[iy], vals[iz]));
        if let Some((a, b, c)) = normal_idx {
            let n = Vector3::new(vals[a], vals[b], vals[c]);
            // A zero normal is the "absent" encoding.
            if n.norm() > 1e-9 {
                point.normal = Some(n.normalize());
            }
        }
        if let Some((a, b, c)) = color_idx {
            point.color = Some([vals[a] / 255.0, vals[b] / 255.0, vals[c] / 255.0]);
        }
        cloud.push(point);
    }
    Ok(cloud)
}

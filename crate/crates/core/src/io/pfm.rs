//! Portable float map (PFM) reader/writer.
//!
//! Grayscale (`Pf`) maps carry inverse depth or depth; color (`PF`) maps
//! carry 3-channel normals. Rows are stored bottom-to-top per the format;
//! the negative scale marks little-endian data. NaN encodes missing values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::IoError;

pub struct PfmData {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Row-major, top-left origin, `channels` floats per pixel.
    pub data: Vec<f32>,
}

pub fn write_pfm(path: &Path, data: &PfmData) -> Result<(), IoError> {
    assert!(data.channels == 1 || data.channels == 3);
    assert_eq!(data.data.len(), data.width * data.height * data.channels);
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    let magic = if data.channels == 1 { "Pf" } else { "PF" };
    write!(w, "{}\n{} {}\n-1.0\n", magic, data.width, data.height)?;
    // PFM stores the bottom row first.
    for y in (0..data.height).rev() {
        let row = &data.data
            [y * data.width * data.channels..(y + 1) * data.width * data.channels];
        let mut bytes = Vec::with_capacity(row.len() * 4);
        for v in row {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<PfmData, IoError> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;

    let bad = |msg: &str| IoError::Format(format!("{}: {msg}", path.display()));

    // Header: three whitespace-separated tokens then a single whitespace byte.
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String, IoError> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(IoError::Format("truncated pfm header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    let magic = token(&bytes)?;
    let channels = match magic.as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(bad(&format!("bad magic {other:?}"))),
    };
    let width: usize = token(&bytes)?.parse().map_err(|_| bad("bad width"))?;
    let height: usize = token(&bytes)?.parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = token(&bytes)?.parse().map_err(|_| bad("bad scale"))?;
    pos += 1; // the single whitespace after the scale line
    let little_endian = scale < 0.0;

    let expected = width * height * channels * 4;
    if bytes.len() < pos + expected {
        return Err(bad("truncated pfm payload"));
    }
    let payload = &bytes[pos..pos + expected];
    let mut data = vec![0f32; width * height * channels];
    for y in 0..height {
        // File rows run bottom-to-top.
        let src_row = height - 1 - y;
        for i in 0..width * channels {
            let off = (src_row * width * channels + i) * 4;
            let raw: [u8; 4] = payload[off..off + 4].try_into().unwrap();
            data[y * width * channels + i] = if little_endian {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            };
        }
    }
    Ok(PfmData {
        width,
        height,
        channels,
        data,
    })
}

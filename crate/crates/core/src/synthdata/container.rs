//! DJVW dataset container.
//!
//! Little-endian layout:
//!
//! ```text
//! "DJVW" | u32 version | u32 view count
//! META: u32 height, u32 width, u32 generator version, utf-8 units note
//! per view: IMG8 (H·W·3 u8) | DPTH (H·W f32) | MASK (H·W bits, LSB first) | CAM0 (9 f64: q wxyz, t xyz, fov xy)
//! ```
//!
//! Every section is a 4-byte tag followed by a u64 payload length.

use std::path::Path;

use super::{CameraRecord, DataError, DatasetRecord, Result, ViewRecord};
use crate::binio::{write_header, write_section, FormatError, Reader};

pub const MAGIC: &[u8; 4] = b"DJVW";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_record(path: impl AsRef<Path>, record: &DatasetRecord) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, record_bytes(record)).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_record(path: impl AsRef<Path>) -> Result<DatasetRecord> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    record_from_bytes(&bytes)
}

pub fn record_bytes(r: &DatasetRecord) -> Vec<u8> {
    let mut out = Vec::new();
    write_header(&mut out, MAGIC, FORMAT_VERSION);
    out.extend_from_slice(&(r.views.len() as u32).to_le_bytes());
    let mut meta = Vec::new();
    meta.extend_from_slice(&(r.height as u32).to_le_bytes());
    meta.extend_from_slice(&(r.width as u32).to_le_bytes());
    meta.extend_from_slice(&r.generator_version.to_le_bytes());
    meta.extend_from_slice(r.units.as_bytes());
    write_section(&mut out, b"META", &meta);
    for v in &r.views {
        write_section(&mut out, b"IMG8", &v.image);
        let depth: Vec<u8> = v.depth.iter().flat_map(|d| d.to_le_bytes()).collect();
        write_section(&mut out, b"DPTH", &depth);
        let mut mask = vec![0u8; v.valid.len().div_ceil(8)];
        for (i, _) in v.valid.iter().enumerate().filter(|(_, &b)| b) {
            mask[i / 8] |= 1 << (i % 8);
        }
        write_section(&mut out, b"MASK", &mask);
        let cam: Vec<u8> = v
            .camera
            .q
            .iter()
            .chain(&v.camera.t)
            .chain(&v.camera.fov)
            .flat_map(|x| x.to_le_bytes())
            .collect();
        write_section(&mut out, b"CAM0", &cam);
    }
    out
}

pub fn record_from_bytes(bytes: &[u8]) -> Result<DatasetRecord> {
    let mut r = Reader::new(bytes);
    r.header(MAGIC, FORMAT_VERSION)?;
    let nviews = r.u32()? as usize;
    let (meta, meta_offset) = r.section(b"META", None)?;
    if meta.len() < 12 {
        return Err(FormatError::Truncated {
            offset: meta_offset,
            needed: 12,
            available: meta.len(),
        }
        .into());
    }
    let word = |i: usize| u32::from_le_bytes(meta[i * 4..i * 4 + 4].try_into().unwrap());
    let (height, width, generator_version) = (word(0) as usize, word(1) as usize, word(2));
    let units = String::from_utf8(meta[12..].to_vec()).map_err(|e| FormatError::Invalid {
        offset: meta_offset + 12,
        message: format!("units note is not utf-8: {e}"),
    })?;
    let hw = height as u64 * width as u64;
    let mut views = Vec::with_capacity(nviews.min(1024));
    for _ in 0..nviews {
        let image = r.section(b"IMG8", Some(hw * 3))?.0.to_vec();
        let depth = r
            .section(b"DPTH", Some(hw * 4))?
            .0
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mask = r.section(b"MASK", Some(hw.div_ceil(8)))?.0;
        let valid = (0..hw as usize).map(|i| mask[i / 8] >> (i % 8) & 1 == 1).collect();
        let cam: Vec<f64> = r
            .section(b"CAM0", Some(72))?
            .0
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        views.push(ViewRecord {
            image,
            depth,
            valid,
            camera: CameraRecord {
                q: [cam[0], cam[1], cam[2], cam[3]],
                t: [cam[4], cam[5], cam[6]],
                fov: [cam[7], cam[8]],
            },
        });
    }
    r.finish()?;
    Ok(DatasetRecord {
        height,
        width,
        generator_version,
        units,
        views,
    })
}

//! Scan and label files in the SemanticKITTI binary layout.
//!
//! * scan: consecutive records of four little-endian `f32` (x, y, z, remission)
//! * labels: one little-endian `u32` per point; the low 16 bits hold the
//!   semantic id, the high 16 bits the instance id (discarded on read, zero on
//!   write)

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::data::class_map::ClassMap;
use crate::data::{Label, Point, PointCloud, PointLabels};
use crate::error::{Error, Result};

const RECORD: usize = 16;

pub fn read_scan(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_scan(&bytes)
}

pub fn decode_scan(bytes: &[u8]) -> Result<PointCloud> {
    if !bytes.len().is_multiple_of(RECORD) {
        return Err(Error::Format(format!(
            "scan size {} is not a multiple of {RECORD} bytes",
            bytes.len()
        )));
    }
    let f = |b: &[u8]| f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    let points = bytes
        .chunks_exact(RECORD)
        .map(|r| Point {
            x: f(&r[0..4]),
            y: f(&r[4..8]),
            z: f(&r[8..12]),
            remission: f(&r[12..16]),
        })
        .collect();
    PointCloud::new(points)
}

pub fn encode_scan(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * RECORD);
    for p in cloud.points() {
        for v in [p.x, p.y, p.z, p.remission] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_scan(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_atomic(path, &encode_scan(cloud))
}

pub fn read_labels(path: &Path, map: &ClassMap) -> Result<PointLabels> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_labels(&bytes, map)
}

pub fn decode_labels(bytes: &[u8], map: &ClassMap) -> Result<PointLabels> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::Format(format!(
            "label file size {} is not a multiple of 4 bytes",
            bytes.len()
        )));
    }
    let labels = bytes
        .chunks_exact(4)
        .map(|w| {
            let word = u32::from_le_bytes([w[0], w[1], w[2], w[3]]);
            map.to_train((word & 0xFFFF) as u16)
        })
        .collect::<Result<Vec<Label>>>()?;
    Ok(PointLabels::new(labels))
}

/// Writes train labels back as raw semantic ids with zero instance bits.
pub fn encode_labels(labels: &PointLabels, map: &ClassMap) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(labels.len() * 4);
    for &l in labels.labels() {
        out.extend_from_slice(&u32::from(map.to_raw(l)?).to_le_bytes());
    }
    Ok(out)
}

pub fn write_labels(path: &Path, labels: &PointLabels, map: &ClassMap) -> Result<()> {
    write_atomic(path, &encode_labels(labels, map)?)
}

/// Reads a scan and its label file, checking that the counts agree.
pub fn read_labeled_scan(
    scan: &Path,
    labels: &Path,
    map: &ClassMap,
) -> Result<(PointCloud, PointLabels)> {
    let cloud = read_scan(scan)?;
    let labels_read = read_labels(labels, map)?;
    if labels_read.len() != cloud.len() {
        return Err(Error::Data(format!(
            "{} holds {} labels but {} holds {} points",
            labels.display(),
            labels_read.len(),
            scan.display(),
            cloud.len()
        )));
    }
    Ok((cloud, labels_read))
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Data(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    let result = fs::File::create(&tmp)
        .and_then(|mut f| {
            f.write_all(bytes)?;
            f.sync_all()
        })
        .and_then(|_| fs::rename(&tmp, path));
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

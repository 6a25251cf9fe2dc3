//! SemanticKITTI scans (`velodyne/*.bin`) and labels (`labels/*.label`).
//!
//! A scan is a sequence of little-endian `f32` quadruples `x, y, z,
//! intensity`. A label file holds one little-endian `u32` per point; the
//! lower 16 bits are the semantic id and the upper 16 bits the instance id.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use napl_core::PointCloud;
use serde::Deserialize;

use crate::error::{NaplError, Result};

const POINT_BYTES: usize = 16;

/// Raw semantic ids to training ids, plus class names and the standard
/// sequence split.
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct LabelRemap {
    #[serde(default)]
    pub description: String,
    pub ignore: u16,
    pub classes: Vec<String>,
    pub learning_map: BTreeMap<u32, u16>,
    pub splits: BTreeMap<String, Vec<String>>,
}

impl LabelRemap {
    /// The shipped 19-class table.
    pub fn semantic_kitti() -> Self {
        serde_json::from_str(include_str!("../assets/semantic_kitti_remap.json"))
            .expect("bundled remap table is valid")
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| NaplError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| NaplError::json(path, e))
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Training id of a raw semantic id; unknown ids are ignored.
    pub fn map(&self, semantic: u16) -> u16 {
        self.learning_map
            .get(&(semantic as u32))
            .copied()
            .unwrap_or(self.ignore)
    }
}

/// Semantic id of a raw label word.
pub fn semantic_id(raw: u32) -> u16 {
    (raw & 0xFFFF) as u16
}

/// Points and intensities from scan bytes.
pub fn parse_scan(bytes: &[u8], path: &Path) -> Result<(Vec<[f32; 3]>, Vec<f32>)> {
    if bytes.is_empty() {
        return Err(NaplError::Parse {
            path: path.into(),
            offset: 0,
            message: "empty scan".into(),
        });
    }
    let whole = bytes.len() / POINT_BYTES * POINT_BYTES;
    if whole != bytes.len() {
        return Err(NaplError::Parse {
            path: path.into(),
            offset: whole as u64,
            message: format!(
                "truncated point record: {} trailing bytes of {POINT_BYTES}",
                bytes.len() - whole
            ),
        });
    }
    let mut coords = Vec::with_capacity(bytes.len() / POINT_BYTES);
    let mut intensity = Vec::with_capacity(bytes.len() / POINT_BYTES);
    for rec in bytes.chunks_exact(POINT_BYTES) {
        let f = |i: usize| f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().expect("4 bytes"));
        coords.push([f(0), f(1), f(2)]);
        intensity.push(f(3));
    }
    Ok((coords, intensity))
}

/// Raw label words from label bytes.
pub fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<u32>> {
    let whole = bytes.len() / 4 * 4;
    if whole != bytes.len() {
        return Err(NaplError::Parse {
            path: path.into(),
            offset: whole as u64,
            message: "label file length is not a multiple of 4".into(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect())
}

pub fn encode_scan(coords: &[[f32; 3]], intensity: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(coords.len() * POINT_BYTES);
    for (p, &i) in coords.iter().zip(intensity) {
        for v in [p[0], p[1], p[2], i] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn encode_labels(raw: &[u32]) -> Vec<u8> {
    raw.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| NaplError::io(path, e))
}

/// Loads a scan and, when given, its labels remapped to training ids.
pub fn load_kitti_scan(scan: &Path, label: Option<&Path>, remap: &LabelRemap) -> Result<PointCloud> {
    let (coords, intensity) = parse_scan(&read(scan)?, scan)?;
    let labels = match label {
        None => None,
        Some(path) => {
            let raw = parse_labels(&read(path)?, path)?;
            if raw.len() != coords.len() {
                return Err(NaplError::Data(format!(
                    "{} has {} labels for {} points in {}",
                    path.display(),
                    raw.len(),
                    coords.len(),
                    scan.display()
                )));
            }
            Some(raw.into_iter().map(|r| remap.map(semantic_id(r))).collect())
        }
    };
    Ok(PointCloud::new(coords, Some(intensity), labels)?)
}

/// Scan/label file pairs of the given sequences under
/// `root/sequences/<seq>/{velodyne,labels}`, in sequence then file order.
pub fn list_frames(root: &Path, sequences: &[String]) -> Result<Vec<(PathBuf, Option<PathBuf>)>> {
    let mut frames = Vec::new();
    for seq in sequences {
        let dir = root.join("sequences").join(seq);
        let velodyne = dir.join("velodyne");
        let entries = fs::read_dir(&velodyne).map_err(|e| NaplError::io(&velodyne, e))?;
        let mut scans: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "bin"))
            .collect();
        scans.sort();
        for scan in scans {
            let stem = scan.file_stem().expect("file has a stem").to_owned();
            let label = dir.join("labels").join(stem).with_extension("label");
            frames.push((scan, label.exists().then_some(label)));
        }
    }
    Ok(frames)
}

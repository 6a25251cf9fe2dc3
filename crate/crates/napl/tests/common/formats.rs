//! Byte-level checks of the KITTI fixtures under `tests/fixtures/kitti`.

use std::fs;
use std::path::{Path, PathBuf};

use napl::kitti::{encode_labels, encode_scan, list_frames, load_kitti_scan, parse_labels, parse_scan, semantic_id, LabelRemap};

pub fn fixture_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/kitti")
}

/// Outcome of the fixture checks: files compared, points compared, and the
/// first mismatch if any.
pub struct FormatReport {
    pub scans: usize,
    pub labels: usize,
    pub points: usize,
    pub failure: Option<String>,
}

/// Semantic id straight from the two low bytes of each little-endian word.
pub fn low_half_oracle(bytes: &[u8]) -> Vec<u16> {
    bytes.chunks(4).map(|w| w[0] as u16 | (w[1] as u16) << 8).collect()
}

pub fn format_checks() -> FormatReport {
    let root = fixture_root();
    let mut r = FormatReport { scans: 0, labels: 0, points: 0, failure: None };
    if let Err(e) = run(&root, &mut r) {
        r.failure = Some(e);
    }
    r
}

fn run(root: &Path, r: &mut FormatReport) -> Result<(), String> {
    let remap = LabelRemap::semantic_kitti();
    let frames = list_frames(root, &["00".into(), "08".into()]).map_err(|e| e.to_string())?;
    for (scan, label) in &frames {
        let bytes = fs::read(scan).map_err(|e| e.to_string())?;
        let (coords, intensity) = parse_scan(&bytes, scan).map_err(|e| e.to_string())?;
        if encode_scan(&coords, &intensity) != bytes {
            return Err(format!("{} does not round-trip", scan.display()));
        }
        r.scans += 1;
        let cloud = load_kitti_scan(scan, label.as_deref(), &remap).map_err(|e| e.to_string())?;
        let Some(label) = label else { continue };
        let bytes = fs::read(label).map_err(|e| e.to_string())?;
        let raw = parse_labels(&bytes, label).map_err(|e| e.to_string())?;
        if encode_labels(&raw) != bytes {
            return Err(format!("{} does not round-trip", label.display()));
        }
        let oracle = low_half_oracle(&bytes);
        let ids: Vec<u16> = raw.iter().map(|&w| semantic_id(w)).collect();
        if ids != oracle {
            return Err(format!("{}: semantic ids differ from the byte oracle", label.display()));
        }
        let mapped: Vec<u16> = oracle.iter().map(|&s| remap.map(s)).collect();
        if cloud.labels() != Some(mapped.as_slice()) {
            return Err(format!("{}: remapped labels differ", label.display()));
        }
        r.labels += 1;
        r.points += raw.len();
    }
    Ok(())
}

//! Line-delimited JSON datasets, one sequence per line.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SequenceMeta, SkeletonSequence};
use crate::error::{shape_err, Error, Result};
use crate::fsutil::atomic_write;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Record {
    format_version: u32,
    label: usize,
    n_frames: usize,
    n_joints: usize,
    coords: Vec<f64>,
    meta: SequenceMeta,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: Option<u32>,
}

pub fn write_dataset_string(seqs: &[SkeletonSequence]) -> Result<String> {
    let mut out = String::new();
    for s in seqs {
        if !s.is_finite() {
            return Err(shape_err("cannot store non-finite coordinates"));
        }
        let rec = Record {
            format_version: FORMAT_VERSION,
            label: s.label,
            n_frames: s.n_frames,
            n_joints: s.n_joints,
            coords: s.coords.clone(),
            meta: s.meta.clone(),
        };
        out += &serde_json::to_string(&rec)?;
        out.push('\n');
    }
    Ok(out)
}

pub fn write_dataset(path: impl AsRef<Path>, seqs: &[SkeletonSequence]) -> Result<()> {
    atomic_write(path, write_dataset_string(seqs)?.as_bytes())
}

pub fn read_dataset_str(text: &str) -> Result<Vec<SkeletonSequence>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let bad = |e: serde_json::Error| Error::Parse { line: line_no, expected: format!("dataset record ({e})") };
        let probe: VersionProbe = serde_json::from_str(line).map_err(bad)?;
        match probe.format_version {
            Some(FORMAT_VERSION) => {}
            Some(found) => return Err(Error::VersionMismatch { found, expected: FORMAT_VERSION }),
            None => {
                return Err(Error::Parse { line: line_no, expected: "format_version field".into() });
            }
        }
        let rec: Record = serde_json::from_str(line).map_err(bad)?;
        let seq = SkeletonSequence::new(rec.n_frames, rec.n_joints, rec.coords, rec.label, rec.meta)
            .map_err(|e| Error::Parse { line: line_no, expected: e.to_string() })?;
        out.push(seq);
    }
    Ok(out)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<SkeletonSequence>> {
    read_dataset_str(&std::fs::read_to_string(path)?)
}

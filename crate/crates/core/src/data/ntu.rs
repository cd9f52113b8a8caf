//! NTU RGB+D `.skeleton` text files.
//!
//! ```text
//! <frame count>
//! per frame:  <body count>
//!   per body: <body id> <9 tracking fields>
//!             <joint count>
//!             per joint: x y z depthX depthY colorX colorY qw qx qy qz state
//! ```

use std::path::Path;

use super::{SequenceMeta, SkeletonSequence};
use crate::error::{Error, Result};

const BODY_HEADER_FIELDS: usize = 10;
const JOINT_FIELDS: usize = 12;

struct Lines<'a> {
    iter: std::str::Lines<'a>,
    line: usize,
}

impl<'a> Lines<'a> {
    /// Next non-blank line, split into tokens.
    fn next(&mut self, expected: &str) -> Result<Vec<&'a str>> {
        for raw in self.iter.by_ref() {
            self.line += 1;
            let tokens: Vec<&str> = raw.split_whitespace().collect();
            if !tokens.is_empty() {
                return Ok(tokens);
            }
        }
        Err(Error::TruncatedFile { line: self.line + 1, expected: expected.to_string() })
    }

    fn count(&mut self, expected: &str) -> Result<usize> {
        let tokens = self.next(expected)?;
        match tokens.as_slice() {
            [one] => one.parse().map_err(|_| self.err(expected)),
            _ => Err(self.err(expected)),
        }
    }

    fn err(&self, expected: &str) -> Error {
        Error::Parse { line: self.line, expected: expected.to_string() }
    }
}

struct BodyTrack {
    id: String,
    n_joints: usize,
    frames: usize,
    coords: Vec<f64>,
}

/// Parses one file into a sequence per tracked body. Bodies visible in fewer
/// than half of the frames are dropped.
pub fn parse_ntu_skeleton(bytes: &[u8]) -> Result<Vec<SkeletonSequence>> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
        line: bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count() + 1,
        expected: "UTF-8 text".into(),
    })?;
    let mut lines = Lines { iter: text.lines(), line: 0 };
    let n_frames = lines.count("frame count")?;
    let mut bodies: Vec<BodyTrack> = Vec::new();

    for _ in 0..n_frames {
        let n_bodies = lines.count("body count")?;
        for _ in 0..n_bodies {
            let header = lines.next("body header")?;
            if header.len() != BODY_HEADER_FIELDS {
                return Err(lines.err("body header with 10 fields"));
            }
            let id = header[0].to_string();
            let n_joints = lines.count("joint count")?;
            if n_joints == 0 {
                return Err(lines.err("positive joint count"));
            }
            let idx = match bodies.iter().position(|b| b.id == id) {
                Some(i) if bodies[i].n_joints != n_joints => {
                    return Err(lines.err("joint count matching earlier frames of this body"));
                }
                Some(i) => i,
                None => {
                    bodies.push(BodyTrack { id, n_joints, frames: 0, coords: Vec::new() });
                    bodies.len() - 1
                }
            };
            for _ in 0..n_joints {
                let fields = lines.next("joint record")?;
                if fields.len() != JOINT_FIELDS {
                    return Err(lines.err("joint record with 12 numeric fields"));
                }
                let mut xyz = [0.0; 3];
                for (k, tok) in fields.iter().enumerate() {
                    let v: f64 = tok.parse().map_err(|_| lines.err("numeric joint field"))?;
                    if k < 3 {
                        if !v.is_finite() {
                            return Err(lines.err("finite coordinate"));
                        }
                        xyz[k] = v;
                    }
                }
                bodies[idx].coords.extend_from_slice(&xyz);
            }
            bodies[idx].frames += 1;
        }
    }

    Ok(bodies
        .into_iter()
        .filter(|b| 2 * b.frames >= n_frames)
        .map(|b| SkeletonSequence {
            n_frames: b.frames,
            n_joints: b.n_joints,
            coords: b.coords,
            label: 0,
            meta: SequenceMeta { source: String::new(), subject: String::new(), body: b.id },
        })
        .collect())
}

/// Parses a file, taking label and subject from NTU-style names such as
/// `S001C002P003R002A013.skeleton` (label = action − 1).
pub fn parse_ntu_file(path: impl AsRef<Path>) -> Result<Vec<SkeletonSequence>> {
    let path = path.as_ref();
    let mut seqs = parse_ntu_skeleton(&std::fs::read(path)?)?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
    let label = tagged_number(stem, 'A').and_then(|a| a.checked_sub(1)).unwrap_or(0);
    let subject = tagged_number(stem, 'P').map(|p| format!("P{p:03}")).unwrap_or_default();
    for s in &mut seqs {
        s.label = label;
        s.meta.source = stem.to_string();
        s.meta.subject = subject.clone();
    }
    Ok(seqs)
}

fn tagged_number(stem: &str, tag: char) -> Option<usize> {
    let start = stem.find(tag)? + 1;
    let digits: String = stem[start..].chars().take_while(char::is_ascii_digit).collect();
    digits.parse().ok()
}

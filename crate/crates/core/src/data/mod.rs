//! Skeleton sequences: NTU `.skeleton` ingestion, the synthetic benchmark,
//! preprocessing and the line-delimited JSON dataset format.

mod dataset;
mod ntu;
mod preprocess;
mod synth;

pub use dataset::{read_dataset, read_dataset_str, write_dataset, write_dataset_string, FORMAT_VERSION};
pub use ntu::{parse_ntu_file, parse_ntu_skeleton};
pub use preprocess::preprocess;
pub use synth::{generate_synthetic, rest_pose, SynthConfig};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub source: String,
    pub subject: String,
    pub body: String,
}

/// `T × N × 3` joint coordinates, flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    pub n_frames: usize,
    pub n_joints: usize,
    pub coords: Vec<f64>,
    pub label: usize,
    pub meta: SequenceMeta,
}

impl SkeletonSequence {
    pub fn new(n_frames: usize, n_joints: usize, coords: Vec<f64>, label: usize, meta: SequenceMeta) -> Result<Self> {
        if coords.len() != n_frames * n_joints * 3 {
            return Err(shape_err(format!(
                "{n_frames} frames × {n_joints} joints needs {} coordinates, got {}",
                n_frames * n_joints * 3,
                coords.len()
            )));
        }
        Ok(SkeletonSequence { n_frames, n_joints, coords, label, meta })
    }

    pub fn joint(&self, t: usize, j: usize) -> [f64; 3] {
        let o = (t * self.n_joints + j) * 3;
        [self.coords[o], self.coords[o + 1], self.coords[o + 2]]
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let w = self.n_joints * 3;
        &self.coords[t * w..(t + 1) * w]
    }

    pub fn is_finite(&self) -> bool {
        self.coords.iter().all(|v| v.is_finite())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(vec![self.n_frames, self.n_joints, 3], self.coords.clone())
    }
}

/// Stacks equally sized sequences into a `[B, T, N, 3]` batch.
pub fn batch_tensor(seqs: &[&SkeletonSequence]) -> Result<Tensor> {
    let first = seqs.first().ok_or_else(|| shape_err("empty batch"))?;
    let (t, n) = (first.n_frames, first.n_joints);
    let mut data = Vec::with_capacity(seqs.len() * t * n * 3);
    for s in seqs {
        if s.n_frames != t || s.n_joints != n {
            return Err(shape_err(format!(
                "batch mixes {t}×{n} and {}×{} sequences",
                s.n_frames, s.n_joints
            )));
        }
        data.extend_from_slice(&s.coords);
    }
    Tensor::new(vec![seqs.len(), t, n, 3], data)
}

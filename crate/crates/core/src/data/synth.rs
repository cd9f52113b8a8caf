//! Synthetic ambiguous-action benchmark.
//!
//! Every sample shares one deterministic base motion. Class `k` adds a
//! sinusoid on limb `k mod L` along axis `(k / L) mod 3`, with amplitude
//! scaled by `1 − ambiguity`, random phase and a jittered frequency. Gaussian
//! noise is added to every coordinate.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{SequenceMeta, SkeletonSequence};
use crate::error::{Error, Result};
use crate::graph::{SkeletonGraph, SkeletonRef};

const BONE_LENGTH: f64 = 0.25;
const LIMB_AMPLITUDE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub frames: usize,
    pub skeleton: SkeletonRef,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub ambiguity: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_classes == 0 || self.samples_per_class == 0 || self.frames == 0 {
            return err("classes, samples per class and frames must be positive");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return err("noise_std must be a finite non-negative number");
        }
        if !(0.0..=1.0).contains(&self.ambiguity) {
            return err("ambiguity must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Deterministic 3-D rest pose: each joint sits one bone length from its
/// breadth-first parent (rooted at joint 0) in a joint-specific direction.
pub fn rest_pose(graph: &SkeletonGraph) -> Vec<[f64; 3]> {
    let n = graph.n_joints();
    let mut pos = vec![[0.0; 3]; n];
    let mut seen = vec![false; n];
    seen[0] = true;
    let mut queue = std::collections::VecDeque::from([0usize]);
    while let Some(u) = queue.pop_front() {
        for &v in graph.neighbors(u) {
            if seen[v] {
                continue;
            }
            seen[v] = true;
            let theta = 2.399963 * v as f64;
            let d = [theta.cos(), theta.sin(), 0.3 * (1.7 * v as f64).sin()];
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            for k in 0..3 {
                pos[v][k] = pos[u][k] + BONE_LENGTH * d[k] / norm;
            }
            queue.push_back(v);
        }
    }
    pos
}

pub fn generate_synthetic(cfg: &SynthConfig, graph: &SkeletonGraph) -> Result<Vec<SkeletonSequence>> {
    cfg.validate()?;
    let limbs = graph.limbs();
    if limbs.is_empty() {
        return Err(Error::InvalidSkeleton("skeleton has no limbs".into()));
    }
    let n = graph.n_joints();
    let t_len = cfg.frames;
    let rest = rest_pose(graph);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut base = Vec::with_capacity(t_len * n * 3);
    for t in 0..t_len {
        let ph = TAU * t as f64 / t_len as f64;
        for (j, r) in rest.iter().enumerate() {
            let lag = 0.2 * j as f64;
            base.push(r[0] + 0.05 * ph.sin());
            base.push(r[1] + 0.03 * (2.0 * ph + lag).sin());
            base.push(r[2] + 0.02 * ph.cos());
        }
    }

    let mut out = Vec::with_capacity(cfg.n_classes * cfg.samples_per_class);
    for s in 0..cfg.samples_per_class {
        for k in 0..cfg.n_classes {
            let limb = &limbs[k % limbs.len()];
            let axis = (k / limbs.len()) % 3;
            let jitter: f64 = rng.random_range(-1.0..=1.0);
            let amp = LIMB_AMPLITUDE * (1.0 - cfg.ambiguity) * (1.0 + 0.2 * jitter);
            let freq: f64 = 1.5 + rng.random::<f64>();
            let phase: f64 = rng.random_range(0.0..TAU);

            let mut coords = base.clone();
            for t in 0..t_len {
                let wave = amp * (TAU * freq * t as f64 / t_len as f64 + phase).sin();
                for (p, &j) in limb.iter().enumerate() {
                    let w = (p + 1) as f64 / limb.len() as f64;
                    coords[(t * n + j) * 3 + axis] += w * wave;
                }
            }
            for c in &mut coords {
                let z: f64 = rng.sample(StandardNormal);
                *c += cfg.noise_std * z;
            }
            let meta = SequenceMeta {
                source: format!("synthetic-{}", cfg.seed),
                subject: format!("{}", s * cfg.n_classes + k),
                body: "0".into(),
            };
            out.push(SkeletonSequence::new(t_len, n, coords, k, meta)?);
        }
    }
    Ok(out)
}

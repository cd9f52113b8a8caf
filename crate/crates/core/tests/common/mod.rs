#![allow(dead_code)]

pub mod oracle;

use g3cn::graph::{SkeletonDef, SkeletonGraph};
use g3cn::Tensor;
use rand::Rng;

pub fn skeleton(name: &str) -> SkeletonGraph {
    let path = format!("{}/../../data/skeletons/{name}.json", env!("CARGO_MANIFEST_DIR"));
    SkeletonDef::load(path).unwrap().build().unwrap().with_name(name)
}

/// Random spanning tree plus a few extra edges.
pub fn random_graph<R: Rng>(n: usize, extra: usize, rng: &mut R) -> SkeletonGraph {
    let mut edges = Vec::new();
    for v in 1..n {
        edges.push((rng.random_range(0..v), v));
    }
    for _ in 0..extra {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        if a != b && !edges.iter().any(|&(x, y)| (x, y) == (a, b) || (x, y) == (b, a)) {
            edges.push((a, b));
        }
    }
    SkeletonGraph::new(n, &edges).unwrap()
}

pub fn rand_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// Random permutation of `0..n`.
pub fn permutation<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// `out[.., perm[j], :] = x[.., j, :]` for a `[.., N, C]` tensor.
pub fn permute_joints(x: &Tensor, perm: &[usize]) -> Tensor {
    let s = x.shape();
    let (n, c) = (s[s.len() - 2], s[s.len() - 1]);
    let mut out = Tensor::zeros(s);
    for b in 0..x.len() / (n * c) {
        for j in 0..n {
            for k in 0..c {
                out.data_mut()[(b * n + perm[j]) * c + k] = x.data()[(b * n + j) * c + k];
            }
        }
    }
    out
}

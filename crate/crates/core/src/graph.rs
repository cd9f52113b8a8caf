//! Physical skeleton graphs, hop distances and the Gaussian filter matrix.

use std::collections::{HashSet, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// On-disk skeleton definition.
///
/// `limbs` is optional and only consulted by the synthetic data generator;
/// when absent, limbs are derived from the leaf chains of the tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonDef {
    pub name: String,
    pub n_joints: usize,
    pub edges: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limbs: Option<Vec<Vec<usize>>>,
}

impl SkeletonDef {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn build(&self) -> Result<SkeletonGraph> {
        let edges: Vec<(usize, usize)> = self.edges.iter().map(|e| (e[0], e[1])).collect();
        let mut g = SkeletonGraph::new(self.n_joints, &edges)?;
        g.name = self.name.clone();
        if let Some(limbs) = &self.limbs {
            for limb in limbs {
                if limb.is_empty() {
                    return Err(Error::InvalidSkeleton("empty limb".into()));
                }
                if let Some(&j) = limb.iter().find(|&&j| j >= self.n_joints) {
                    return Err(Error::InvalidSkeleton(format!("limb joint {j} out of range")));
                }
            }
            g.limbs = Some(limbs.clone());
        }
        Ok(g)
    }
}

/// A skeleton given either inline or as a path to a definition file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SkeletonRef {
    Path(String),
    Inline(SkeletonDef),
}

impl SkeletonRef {
    /// Loads the definition; relative paths resolve against `base` when given.
    pub fn resolve(&self, base: Option<&Path>) -> Result<SkeletonDef> {
        match self {
            SkeletonRef::Inline(d) => Ok(d.clone()),
            SkeletonRef::Path(p) => {
                let path = Path::new(p);
                match base {
                    Some(b) if path.is_relative() && !path.exists() => SkeletonDef::load(b.join(path)),
                    _ => SkeletonDef::load(path),
                }
            }
        }
    }
}

/// A validated, connected, undirected skeleton graph (joints are vertices, bones are edges).
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonGraph {
    pub name: String,
    n_joints: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
    limbs: Option<Vec<Vec<usize>>>,
}

impl SkeletonGraph {
    /// Validates the edge list and checks connectivity.
    pub fn new(n_joints: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n_joints < 2 {
            return Err(Error::InvalidSkeleton(format!(
                "need at least 2 joints, got {n_joints}"
            )));
        }
        let mut seen = HashSet::new();
        let mut neighbors = vec![Vec::new(); n_joints];
        for &(a, b) in edges {
            if a >= n_joints || b >= n_joints {
                return Err(Error::InvalidEdge { a, b, reason: "endpoint out of range" });
            }
            if a == b {
                return Err(Error::InvalidEdge { a, b, reason: "self-loop" });
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::InvalidEdge { a, b, reason: "duplicate edge" });
            }
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for adj in &mut neighbors {
            adj.sort_unstable();
        }
        let g = SkeletonGraph {
            name: String::new(),
            n_joints,
            edges: edges.to_vec(),
            neighbors,
            limbs: None,
        };
        let from_root = g.bfs(0);
        if let Some(j) = from_root.iter().position(|d| d.is_none()) {
            return Err(Error::DisconnectedGraph(j));
        }
        Ok(g)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn n_joints(&self) -> usize {
        self.n_joints
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, joint: usize) -> &[usize] {
        &self.neighbors[joint]
    }

    pub fn degree(&self, joint: usize) -> usize {
        self.neighbors[joint].len()
    }

    pub fn to_def(&self) -> SkeletonDef {
        SkeletonDef {
            name: self.name.clone(),
            n_joints: self.n_joints,
            edges: self.edges.iter().map(|&(a, b)| [a, b]).collect(),
            limbs: self.limbs.clone(),
        }
    }

    /// Relabels joints so that old joint `j` becomes `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n_joints {
            return Err(Error::InvalidSkeleton("permutation length mismatch".into()));
        }
        let edges: Vec<_> = self.edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
        let mut g = SkeletonGraph::new(self.n_joints, &edges)?;
        g.name = self.name.clone();
        g.limbs = self
            .limbs
            .as_ref()
            .map(|ls| ls.iter().map(|l| l.iter().map(|&j| perm[j]).collect()).collect());
        Ok(g)
    }

    /// Limbs used by the synthetic generator: the explicit list when the
    /// definition carries one, otherwise the chain from each leaf back to
    /// (excluding) the nearest branching joint.
    pub fn limbs(&self) -> Vec<Vec<usize>> {
        if let Some(l) = &self.limbs {
            return l.clone();
        }
        let mut limbs = Vec::new();
        for leaf in (0..self.n_joints).filter(|&j| self.degree(j) == 1) {
            let mut chain = vec![leaf];
            let mut prev = leaf;
            let mut cur = self.neighbors[leaf][0];
            while self.degree(cur) == 2 {
                chain.push(cur);
                let next = if self.neighbors[cur][0] == prev {
                    self.neighbors[cur][1]
                } else {
                    self.neighbors[cur][0]
                };
                prev = cur;
                cur = next;
            }
            chain.reverse();
            limbs.push(chain);
        }
        limbs
    }

    fn bfs(&self, source: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.n_joints];
        dist[source] = Some(0);
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap_or(0);
            for &v in &self.neighbors[u] {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// All-pairs hop distances, one breadth-first search per joint.
    pub fn shortest_path_distances(&self) -> DistanceMatrix {
        let n = self.n_joints;
        let mut d = vec![0usize; n * n];
        for i in 0..n {
            for (j, dist) in self.bfs(i).into_iter().enumerate() {
                // connectivity is checked at construction
                d[i * n + j] = dist.expect("connected graph");
            }
        }
        DistanceMatrix { n, d }
    }

    /// Φ(D) for this skeleton.
    pub fn gaussian_filter(&self) -> FilterMatrix {
        self.shortest_path_distances().gaussian_filter()
    }
}

/// Symmetric matrix of hop counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceMatrix {
    n: usize,
    d: Vec<usize>,
}

impl DistanceMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> usize {
        self.d[i * self.n + j]
    }

    pub fn rows(&self) -> Vec<Vec<usize>> {
        self.d.chunks(self.n).map(<[usize]>::to_vec).collect()
    }

    /// φ(i, j) = exp(−d(i, j)²).
    pub fn gaussian_filter(&self) -> FilterMatrix {
        let phi = self.d.iter().map(|&d| (-((d * d) as f64)).exp()).collect();
        FilterMatrix { n: self.n, phi }
    }
}

/// Constant Gaussian filter matrix. Column `j` is the smoothing kernel for position j.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterMatrix {
    n: usize,
    phi: Vec<f64>,
}

impl FilterMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.phi[i * self.n + j]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|k| self.get(k, j)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.phi
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(vec![self.n, self.n], self.phi.clone())
    }

    /// Identity "filter"; only meaningful in tests of the correction step.
    pub fn identity(n: usize) -> Self {
        let mut phi = vec![0.0; n * n];
        for i in 0..n {
            phi[i * n + i] = 1.0;
        }
        FilterMatrix { n, phi }
    }
}

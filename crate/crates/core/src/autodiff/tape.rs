//! Define-by-run reverse-mode differentiation over dense `f64` tensors.
//!
//! Every operation appends one node to the [`Tape`]; node ids are assigned in
//! execution order, so walking the tape backwards visits each node after all
//! of its consumers.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{strides, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary { op: BinaryOp, a: Var, b: Var },
    Affine { x: Var, scale: f64 },
    MatMul { a: Var, b: Var },
    Act { op: Activation, x: Var },
    Mean { x: Var, outer: usize, len: usize, inner: usize },
    Sum { x: Var },
    GraphContract { a: Var, x: Var },
    NodeMix { adj: Var, x: Var },
    PairwiseDiff { u: Var, v: Var },
    RowNormalize { x: Var, argmax: Vec<usize>, inv: Vec<f64> },
    Permute { x: Var, perm: Vec<usize> },
    Reshape { x: Var },
    TemporalConv { x: Var, w: Var, stride: usize, pad: usize },
    BatchNorm { x: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Per-channel statistics produced by a training-mode batch normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (divide by `count`) variance.
    pub var: Vec<f64>,
    /// Values per channel.
    pub count: usize,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Test hook: corrupts the tanh derivative so verification tooling can
    /// prove it detects wrong gradients.
    #[doc(hidden)]
    pub fn inject_grad_fault(&mut self, on: bool) {
        self.fault = on;
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input (parameter or tracked input).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// A constant input; no gradient is ever accumulated for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let n = &self.nodes[v.0];
        n.grad.as_ref().map(|g| Tensor::from_vec(n.value.shape().to_vec(), g.clone()))
    }

    /// Gradient of `v`, or zeros when no backward pass reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v).unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---------------------------------------------------------------------
    // forward operations
    // ---------------------------------------------------------------------

    /// Elementwise binary op. `b` must have the shape of `a` or of a trailing
    /// suffix of it (a scalar is the empty suffix); for the commutative ops the
    /// operands are swapped when `a` is the smaller one.
    pub fn elementwise(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (a, b, sa, sb) = if op != BinaryOp::Sub && !is_suffix(&sb, &sa) && is_suffix(&sa, &sb) {
            (b, a, sb, sa)
        } else {
            (a, b, sa, sb)
        };
        if !is_suffix(&sb, &sa) {
            return Err(shape_err(format!("cannot broadcast {sb:?} onto {sa:?}")));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let lb = bv.len();
        let data: Vec<f64> = match op {
            BinaryOp::Add => av.iter().enumerate().map(|(i, &x)| x + bv[i % lb]).collect(),
            BinaryOp::Sub => av.iter().enumerate().map(|(i, &x)| x - bv[i % lb]).collect(),
            BinaryOp::Mul => av.iter().enumerate().map(|(i, &x)| x * bv[i % lb]).collect(),
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_vec(sa, data), rg, Op::Binary { op, a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Mul, a, b)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Affine { x, scale })
    }

    /// `a[..., P, Q] · b[Q, R] -> [..., P, R]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(shape_err(format!("matmul {sa:?} x {sb:?}")));
        }
        let (q, r) = (sb[0], sb[1]);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = r;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let rows = av.len() / q;
        let mut out = vec![0.0; rows * r];
        matmul_into(av, bv, &mut out, rows, q, r);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_vec(shape, out), rg, Op::MatMul { a, b }))
    }

    pub fn activation(&mut self, op: Activation, x: Var) -> Var {
        let value = match op {
            Activation::Tanh => self.value(x).map(f64::tanh),
            Activation::Sigmoid => self.value(x).map(sigmoid),
            Activation::Relu => self.value(x).map(|v| v.max(0.0)),
        };
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Act { op, x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(Activation::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(Activation::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(Activation::Relu, x)
    }

    /// Arithmetic mean along `axis`; the axis is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis { axis, rank: shape.len() });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &xv[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let scale = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= scale);
        let mut oshape = shape;
        oshape.remove(axis);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(oshape, out), rg, Op::Mean { x, outer, len, inner }))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum { x })
    }

    /// Channel-wise adjacency contraction:
    /// `out[.., t, i, c] = Σ_j a[.., c, i, j] · x[.., t, j, c]`
    /// with `a: [p.., C, N, N]` and `x: [p.., T, N, C]`.
    pub fn graph_contract(&mut self, a: Var, x: Var) -> Result<Var> {
        let (sa, sx) = (self.shape(a).to_vec(), self.shape(x).to_vec());
        let geo = ContractGeometry::new(&sa, &sx)?;
        let av = self.value(a).data();
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        let ContractGeometry { batch, c, n, t } = geo;
        let mut at = vec![0.0; c * n * n];
        for b in 0..batch {
            transpose_cij_to_ijc(&av[b * c * n * n..(b + 1) * c * n * n], &mut at, c, n);
            let xb = &xv[b * t * n * c..(b + 1) * t * n * c];
            let ob = &mut out[b * t * n * c..(b + 1) * t * n * c];
            for ti in 0..t {
                for i in 0..n {
                    let orow = &mut ob[(ti * n + i) * c..(ti * n + i + 1) * c];
                    for j in 0..n {
                        let arow = &at[(i * n + j) * c..(i * n + j + 1) * c];
                        let xrow = &xb[(ti * n + j) * c..(ti * n + j + 1) * c];
                        for ((o, &w), &v) in orow.iter_mut().zip(arow).zip(xrow) {
                            *o += w * v;
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[a, x]);
        Ok(self.push(Tensor::from_vec(sx, out), rg, Op::GraphContract { a, x }))
    }

    /// Shared (channel-independent) adjacency: `out[.., i, c] = Σ_j adj[i, j] · x[.., j, c]`.
    pub fn node_mix(&mut self, adj: Var, x: Var) -> Result<Var> {
        let (sa, sx) = (self.shape(adj).to_vec(), self.shape(x).to_vec());
        if sa.len() != 2 || sa[0] != sa[1] || sx.len() < 2 || sx[sx.len() - 2] != sa[0] {
            return Err(shape_err(format!("node_mix adjacency {sa:?} with features {sx:?}")));
        }
        let n = sa[0];
        let c = sx[sx.len() - 1];
        let blocks = self.value(x).len() / (n * c);
        let av = self.value(adj).data();
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for p in 0..blocks {
            let off = p * n * c;
            matmul_into(av, &xv[off..off + n * c], &mut out[off..off + n * c], n, n, c);
        }
        let rg = self.rg(&[adj, x]);
        Ok(self.push(Tensor::from_vec(sx, out), rg, Op::NodeMix { adj, x }))
    }

    /// `out[.., c, i, j] = u[.., i, c] − v[.., j, c]`.
    pub fn pairwise_diff(&mut self, u: Var, v: Var) -> Result<Var> {
        let (su, sv) = (self.shape(u).to_vec(), self.shape(v).to_vec());
        if su != sv || su.len() < 2 {
            return Err(shape_err(format!("pairwise_diff {su:?} vs {sv:?}")));
        }
        let r = su.len();
        let (n, c) = (su[r - 2], su[r - 1]);
        let batch = self.value(u).len() / (n * c);
        let uv = self.value(u).data();
        let vv = self.value(v).data();
        let mut out = vec![0.0; batch * c * n * n];
        for b in 0..batch {
            let (ub, vb) = (&uv[b * n * c..], &vv[b * n * c..]);
            let ob = &mut out[b * c * n * n..(b + 1) * c * n * n];
            for ch in 0..c {
                for i in 0..n {
                    let ui = ub[i * c + ch];
                    for j in 0..n {
                        ob[(ch * n + i) * n + j] = ui - vb[j * c + ch];
                    }
                }
            }
        }
        let mut shape = su[..r - 2].to_vec();
        shape.extend([c, n, n]);
        let rg = self.rg(&[u, v]);
        Ok(self.push(Tensor::from_vec(shape, out), rg, Op::PairwiseDiff { u, v }))
    }

    /// Divides every row (last axis) by its maximum absolute entry. Rows whose
    /// maximum is below `eps` become zero.
    pub fn row_max_abs_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let l = *shape.last().ok_or_else(|| shape_err("row normalisation of a scalar"))?;
        let xv = self.value(x).data();
        let rows = if l == 0 { 0 } else { xv.len() / l };
        let mut out = vec![0.0; xv.len()];
        let mut argmax = Vec::with_capacity(rows);
        let mut inv = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * l..(r + 1) * l];
            let (k, m) = row
                .iter()
                .enumerate()
                .fold((0, 0.0f64), |(bk, bm), (k, v)| if v.abs() > bm { (k, v.abs()) } else { (bk, bm) });
            let s = if m < eps { 0.0 } else { 1.0 / m };
            if s != 0.0 {
                // divide rather than scale so the max entry maps to exactly ±1
                for (o, v) in out[r * l..(r + 1) * l].iter_mut().zip(row) {
                    *o = v / m;
                }
            }
            argmax.push(k);
            inv.push(s);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(shape, out), rg, Op::RowNormalize { x, argmax, inv }))
    }

    /// Axis permutation: output axis `k` is input axis `perm[k]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err(format!("invalid permutation {perm:?} for rank {}", shape.len())));
        }
        let oshape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let src = permuted_offsets(&shape, perm);
        let xv = self.value(x).data();
        let out = src.iter().map(|&o| xv[o]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(oshape, out), rg, Op::Permute { x, perm: perm.to_vec() }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Reshape { x }))
    }

    /// Convolution along the time axis.
    /// `x: [B, T, N, Cin]`, `w: [K, Cin, Cout]` → `[B, T', N, Cout]` with
    /// `T' = (T + 2·pad − K) / stride + 1`, zero padding.
    pub fn temporal_conv(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 3 || sx[3] != sw[1] || stride == 0 || sx[1] + 2 * pad < sw[0] {
            return Err(shape_err(format!("temporal_conv x {sx:?} w {sw:?} stride {stride}")));
        }
        let (bsz, t, n, ci) = (sx[0], sx[1], sx[2], sx[3]);
        let (k, co) = (sw[0], sw[2]);
        let to = (t + 2 * pad - k) / stride + 1;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; bsz * to * n * co];
        for b in 0..bsz {
            for tt in 0..to {
                for kk in 0..k {
                    let Some(ts) = (tt * stride + kk).checked_sub(pad).filter(|&ts| ts < t) else {
                        continue;
                    };
                    let xs = &xv[((b * t + ts) * n) * ci..((b * t + ts + 1) * n) * ci];
                    let os = &mut out[((b * to + tt) * n) * co..((b * to + tt + 1) * n) * co];
                    matmul_acc(xs, &wv[kk * ci * co..(kk + 1) * ci * co], os, n, ci, co);
                }
            }
        }
        let rg = self.rg(&[x, w]);
        Ok(self.push(Tensor::from_vec(vec![bsz, to, n, co], out), rg, Op::TemporalConv { x, w, stride, pad }))
    }

    /// Normalises each channel (last axis) with the statistics of this batch.
    /// Returns the normalised tensor and the batch mean / biased variance.
    pub fn batch_norm(&mut self, x: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| shape_err("batch_norm of a scalar"))?;
        let xv = self.value(x).data();
        let m = xv.len() / c;
        if m == 0 {
            return Err(shape_err("batch_norm over an empty batch"));
        }
        let mut mean = vec![0.0; c];
        for row in xv.chunks(c) {
            for (s, v) in mean.iter_mut().zip(row) {
                *s += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        let mut var = vec![0.0; c];
        for row in xv.chunks(c) {
            for ((s, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - mu) * (v - mu);
            }
        }
        var.iter_mut().for_each(|v| *v /= m as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xhat: Vec<f64> = xv
            .iter()
            .enumerate()
            .map(|(i, v)| (v - mean[i % c]) * inv_std[i % c])
            .collect();
        let rg = self.rg(&[x]);
        let out = self.push(
            Tensor::from_vec(shape, xhat.clone()),
            rg,
            Op::BatchNorm { x, xhat, inv_std },
        );
        Ok((out, BatchStats { mean, var, count: m }))
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(shape_err(format!("logits {s:?} with {} labels", labels.len())));
        }
        let (bsz, k) = (s[0], s[1]);
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidLabel { label, n_classes: k });
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; bsz * k];
        let mut loss = 0.0;
        for (b, &label) in labels.iter().enumerate() {
            let row = &lv[b * k..(b + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let log_z = z.ln();
            for (p, v) in probs[b * k..(b + 1) * k].iter_mut().zip(row) {
                *p = (v - mx).exp() / z;
            }
            loss -= row[label] - mx - log_z;
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / bsz as f64),
            rg,
            Op::SoftmaxCe { logits, labels: labels.to_vec(), probs },
        ))
    }

    // ---------------------------------------------------------------------
    // reverse pass
    // ---------------------------------------------------------------------

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    /// Gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 || !shape.iter().all(|&d| d == 1) {
            return Err(Error::NotScalar(shape.to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut adj);
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Binary { op, a, b } => {
                let lb = self.value(*b).len();
                if let Some(da) = self.slot(*a, adj) {
                    match op {
                        BinaryOp::Add | BinaryOp::Sub => add_assign(da, g),
                        BinaryOp::Mul => {
                            let bv = self.value(*b).data();
                            for (i, (d, gi)) in da.iter_mut().zip(g).enumerate() {
                                *d += gi * bv[i % lb];
                            }
                        }
                    }
                }
                if let Some(db) = self.slot(*b, adj) {
                    match op {
                        BinaryOp::Add => g.iter().enumerate().for_each(|(i, gi)| db[i % lb] += gi),
                        BinaryOp::Sub => g.iter().enumerate().for_each(|(i, gi)| db[i % lb] -= gi),
                        BinaryOp::Mul => {
                            let av = self.value(*a).data();
                            g.iter().zip(av).enumerate().for_each(|(i, (gi, x))| db[i % lb] += gi * x);
                        }
                    }
                }
            }
            Op::Affine { x, scale } => {
                if let Some(dx) = self.slot(*x, adj) {
                    dx.iter_mut().zip(g).for_each(|(d, gi)| *d += scale * gi);
                }
            }
            Op::MatMul { a, b } => {
                let sb = self.shape(*b);
                let (q, r) = (sb[0], sb[1]);
                let rows = g.len() / r;
                if let Some(da) = self.slot(*a, adj) {
                    // dA = G · Bᵀ
                    let bv = self.value(*b).data();
                    for m in 0..rows {
                        let grow = &g[m * r..(m + 1) * r];
                        for (qi, d) in da[m * q..(m + 1) * q].iter_mut().enumerate() {
                            *d += dot(grow, &bv[qi * r..(qi + 1) * r]);
                        }
                    }
                }
                if let Some(db) = self.slot(*b, adj) {
                    // dB = Aᵀ · G
                    let av = self.value(*a).data();
                    for m in 0..rows {
                        let grow = &g[m * r..(m + 1) * r];
                        for qi in 0..q {
                            let x = av[m * q + qi];
                            if x != 0.0 {
                                axpy(x, grow, &mut db[qi * r..(qi + 1) * r]);
                            }
                        }
                    }
                }
            }
            Op::Act { op, x } => {
                let fault = if self.fault && *op == Activation::Tanh { 1.5 } else { 1.0 };
                let y = node.value.data();
                let xv = self.value(*x).data();
                if let Some(dx) = self.slot(*x, adj) {
                    for i in 0..dx.len() {
                        let d = match op {
                            Activation::Tanh => 1.0 - y[i] * y[i],
                            Activation::Sigmoid => y[i] * (1.0 - y[i]),
                            Activation::Relu => {
                                if xv[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        dx[i] += fault * d * g[i];
                    }
                }
            }
            Op::Mean { x, outer, len, inner } => {
                if let Some(dx) = self.slot(*x, adj) {
                    let s = 1.0 / *len as f64;
                    for o in 0..*outer {
                        let go = &g[o * inner..(o + 1) * inner];
                        for k in 0..*len {
                            let off = (o * len + k) * inner;
                            axpy(s, go, &mut dx[off..off + inner]);
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(dx) = self.slot(*x, adj) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::GraphContract { a, x } => {
                let geo = ContractGeometry::new(self.shape(*a), self.shape(*x)).expect("checked in forward");
                let ContractGeometry { batch, c, n, t } = geo;
                let av = self.value(*a).data();
                let xv = self.value(*x).data();
                if let Some(dx) = self.slot(*x, adj) {
                    let mut at = vec![0.0; c * n * n];
                    for b in 0..batch {
                        transpose_cij_to_ijc(&av[b * c * n * n..(b + 1) * c * n * n], &mut at, c, n);
                        let gb = &g[b * t * n * c..(b + 1) * t * n * c];
                        let db = &mut dx[b * t * n * c..(b + 1) * t * n * c];
                        for ti in 0..t {
                            for i in 0..n {
                                let grow = &gb[(ti * n + i) * c..(ti * n + i + 1) * c];
                                for j in 0..n {
                                    let arow = &at[(i * n + j) * c..(i * n + j + 1) * c];
                                    let drow = &mut db[(ti * n + j) * c..(ti * n + j + 1) * c];
                                    for ((d, &w), &gv) in drow.iter_mut().zip(arow).zip(grow) {
                                        *d += w * gv;
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(da) = self.slot(*a, adj) {
                    let mut acc = vec![0.0; n * n * c];
                    for b in 0..batch {
                        acc.iter_mut().for_each(|v| *v = 0.0);
                        let gb = &g[b * t * n * c..(b + 1) * t * n * c];
                        let xb = &xv[b * t * n * c..(b + 1) * t * n * c];
                        for ti in 0..t {
                            for i in 0..n {
                                let grow = &gb[(ti * n + i) * c..(ti * n + i + 1) * c];
                                for j in 0..n {
                                    let xrow = &xb[(ti * n + j) * c..(ti * n + j + 1) * c];
                                    let arow = &mut acc[(i * n + j) * c..(i * n + j + 1) * c];
                                    for ((d, &gv), &xval) in arow.iter_mut().zip(grow).zip(xrow) {
                                        *d += gv * xval;
                                    }
                                }
                            }
                        }
                        let dab = &mut da[b * c * n * n..(b + 1) * c * n * n];
                        for ch in 0..c {
                            for i in 0..n {
                                for j in 0..n {
                                    dab[(ch * n + i) * n + j] += acc[(i * n + j) * c + ch];
                                }
                            }
                        }
                    }
                }
            }
            Op::NodeMix { adj: a, x } => {
                let n = self.shape(*a)[0];
                let sx = self.shape(*x);
                let c = sx[sx.len() - 1];
                let blocks = g.len() / (n * c);
                let av = self.value(*a).data();
                let xv = self.value(*x).data();
                if let Some(dx) = self.slot(*x, adj) {
                    for p in 0..blocks {
                        let off = p * n * c;
                        for i in 0..n {
                            let grow = &g[off + i * c..off + (i + 1) * c];
                            for j in 0..n {
                                let w = av[i * n + j];
                                axpy(w, grow, &mut dx[off + j * c..off + (j + 1) * c]);
                            }
                        }
                    }
                }
                if let Some(da) = self.slot(*a, adj) {
                    for p in 0..blocks {
                        let off = p * n * c;
                        for i in 0..n {
                            let grow = &g[off + i * c..off + (i + 1) * c];
                            for j in 0..n {
                                da[i * n + j] += dot(grow, &xv[off + j * c..off + (j + 1) * c]);
                            }
                        }
                    }
                }
            }
            Op::PairwiseDiff { u, v } => {
                let su = self.shape(*u);
                let r = su.len();
                let (n, c) = (su[r - 2], su[r - 1]);
                let batch = g.len() / (c * n * n);
                for (var, sign, along_rows) in [(*u, 1.0, true), (*v, -1.0, false)] {
                    if let Some(d) = self.slot(var, adj) {
                        for b in 0..batch {
                            let gb = &g[b * c * n * n..(b + 1) * c * n * n];
                            for ch in 0..c {
                                for i in 0..n {
                                    for j in 0..n {
                                        let gv = gb[(ch * n + i) * n + j];
                                        let node_idx = if along_rows { i } else { j };
                                        d[b * n * c + node_idx * c + ch] += sign * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::RowNormalize { x, argmax, inv } => {
                let l = *node.value.shape().last().unwrap();
                let xv = self.value(*x).data();
                if let Some(dx) = self.slot(*x, adj) {
                    for (r, (&k, &s)) in argmax.iter().zip(inv).enumerate() {
                        if s == 0.0 {
                            continue;
                        }
                        let row = &xv[r * l..(r + 1) * l];
                        let grow = &g[r * l..(r + 1) * l];
                        let drow = &mut dx[r * l..(r + 1) * l];
                        axpy(s, grow, drow);
                        let sign = row[k].signum();
                        drow[k] -= sign * s * s * dot(grow, row);
                    }
                }
            }
            Op::Permute { x, perm } => {
                if let Some(dx) = self.slot(*x, adj) {
                    let src = permuted_offsets(self.value(*x).shape(), perm);
                    for (gi, &o) in g.iter().zip(&src) {
                        dx[o] += gi;
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(dx) = self.slot(*x, adj) {
                    add_assign(dx, g);
                }
            }
            Op::TemporalConv { x, w, stride, pad } => {
                let sx = self.shape(*x);
                let sw = self.shape(*w);
                let (bsz, t, n, ci) = (sx[0], sx[1], sx[2], sx[3]);
                let (k, co) = (sw[0], sw[2]);
                let to = node.value.shape()[1];
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let taps = |tt: usize, kk: usize| (tt * stride + kk).checked_sub(*pad).filter(|&ts| ts < t);
                if let Some(dx) = self.slot(*x, adj) {
                    for b in 0..bsz {
                        for tt in 0..to {
                            let gs = &g[((b * to + tt) * n) * co..((b * to + tt + 1) * n) * co];
                            for kk in 0..k {
                                let Some(ts) = taps(tt, kk) else { continue };
                                let ds = &mut dx[((b * t + ts) * n) * ci..((b * t + ts + 1) * n) * ci];
                                let wk = &wv[kk * ci * co..(kk + 1) * ci * co];
                                for nn in 0..n {
                                    let grow = &gs[nn * co..(nn + 1) * co];
                                    for (i, d) in ds[nn * ci..(nn + 1) * ci].iter_mut().enumerate() {
                                        *d += dot(grow, &wk[i * co..(i + 1) * co]);
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(dw) = self.slot(*w, adj) {
                    for b in 0..bsz {
                        for tt in 0..to {
                            let gs = &g[((b * to + tt) * n) * co..((b * to + tt + 1) * n) * co];
                            for kk in 0..k {
                                let Some(ts) = taps(tt, kk) else { continue };
                                let xs = &xv[((b * t + ts) * n) * ci..((b * t + ts + 1) * n) * ci];
                                let dwk = &mut dw[kk * ci * co..(kk + 1) * ci * co];
                                for nn in 0..n {
                                    let grow = &gs[nn * co..(nn + 1) * co];
                                    for i in 0..ci {
                                        let xval = xs[nn * ci + i];
                                        if xval != 0.0 {
                                            axpy(xval, grow, &mut dwk[i * co..(i + 1) * co]);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::BatchNorm { x, xhat, inv_std } => {
                if let Some(dx) = self.slot(*x, adj) {
                    let c = inv_std.len();
                    let m = (g.len() / c) as f64;
                    let mut sum_g = vec![0.0; c];
                    let mut sum_gx = vec![0.0; c];
                    for (i, (gi, xh)) in g.iter().zip(xhat).enumerate() {
                        sum_g[i % c] += gi;
                        sum_gx[i % c] += gi * xh;
                    }
                    for (i, d) in dx.iter_mut().enumerate() {
                        let ch = i % c;
                        *d += inv_std[ch] / m * (m * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch]);
                    }
                }
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                if let Some(dl) = self.slot(*logits, adj) {
                    let bsz = labels.len();
                    let k = probs.len() / bsz;
                    let s = g[0] / bsz as f64;
                    for (b, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            dl[b * k + j] += s * (probs[b * k + j] - onehot);
                        }
                    }
                }
            }
        }
    }

    /// The adjoint buffer for `v`, allocated on first use; `None` when `v`
    /// does not require a gradient.
    fn slot<'a>(&self, v: Var, adj: &'a mut [Option<Vec<f64>>]) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(adj[v.0].get_or_insert_with(|| vec![0.0; len]))
    }
}

struct ContractGeometry {
    batch: usize,
    c: usize,
    n: usize,
    t: usize,
}

impl ContractGeometry {
    fn new(sa: &[usize], sx: &[usize]) -> Result<Self> {
        let r = sa.len();
        let ok = r >= 3
            && sx.len() == r
            && sa[..r - 3] == sx[..r - 3]
            && sa[r - 1] == sa[r - 2]
            && sx[r - 2] == sa[r - 1]
            && sx[r - 1] == sa[r - 3];
        if !ok {
            return Err(shape_err(format!("graph_contract adjacency {sa:?} with features {sx:?}")));
        }
        Ok(ContractGeometry {
            batch: sa[..r - 3].iter().product(),
            c: sa[r - 3],
            n: sa[r - 1],
            t: sx[r - 3],
        })
    }
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], rows: usize, q: usize, r: usize) {
    out.iter_mut().for_each(|v| *v = 0.0);
    matmul_acc(a, b, out, rows, q, r);
}

fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], rows: usize, q: usize, r: usize) {
    for m in 0..rows {
        let orow = &mut out[m * r..(m + 1) * r];
        for k in 0..q {
            let x = a[m * q + k];
            if x != 0.0 {
                axpy(x, &b[k * r..(k + 1) * r], orow);
            }
        }
    }
}

fn transpose_cij_to_ijc(a: &[f64], at: &mut [f64], c: usize, n: usize) {
    for ch in 0..c {
        for i in 0..n {
            for j in 0..n {
                at[(i * n + j) * c + ch] = a[(ch * n + i) * n + j];
            }
        }
    }
}

/// For each output position of `permute(shape, perm)`, the source offset.
fn permuted_offsets(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let st = strides(shape);
    let oshape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let ost: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
    let total: usize = oshape.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; oshape.len()];
    let mut off = 0usize;
    for _ in 0..total {
        out.push(off);
        for ax in (0..oshape.len()).rev() {
            idx[ax] += 1;
            off += ost[ax];
            if idx[ax] < oshape[ax] {
                break;
            }
            off -= ost[ax] * oshape[ax];
            idx[ax] = 0;
        }
    }
    out
}

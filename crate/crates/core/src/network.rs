//! The spatio-temporal classifier: a stack of basic blocks (spatial units,
//! temporal convolution, normalisation, residual), global pooling and a
//! linear head.

use std::fmt::Write as _;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::gated::{gated_forward, plain_forward, GateActivation, GateOverride, GatedParams, PlainParams};
use crate::graph::{SkeletonGraph, SkeletonRef};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::topology::{gaussian_topology_forward, reduced_channels, TopologyParams};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub temporal_stride: usize,
    pub n_branches: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyMode {
    #[default]
    Gaussian,
    /// Correction coefficients fixed to one.
    Baseline,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    #[default]
    Gated,
    Plain,
}

fn default_reduction() -> usize {
    8
}
fn default_temporal_kernel() -> usize {
    9
}
fn default_bn_eps() -> f64 {
    1e-5
}
fn default_bn_momentum() -> f64 {
    0.1
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub blocks: Vec<BlockConfig>,
    pub n_classes: usize,
    pub skeleton: SkeletonRef,
    #[serde(default)]
    pub gate_activation: GateActivation,
    #[serde(default)]
    pub topology_mode: TopologyMode,
    #[serde(default)]
    pub aggregation_mode: AggregationMode,
    #[serde(default = "default_reduction")]
    pub reduction: usize,
    #[serde(default = "default_reduction")]
    pub min_reduced_channels: usize,
    #[serde(default = "default_temporal_kernel")]
    pub temporal_kernel: usize,
    #[serde(default)]
    pub xi_zero_init: bool,
    #[serde(default)]
    pub xi_bias: bool,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
    /// Per joint-coordinate normalisation of the raw input.
    #[serde(default = "default_true")]
    pub input_norm: bool,
}

impl NetworkConfig {
    /// Ten blocks, channels 64-64-64-64-128-128-128-256-256-256, stride 2
    /// entering the fifth and eighth block, three spatial units per block.
    pub fn standard(n_classes: usize, skeleton: SkeletonRef) -> Self {
        let plan = [64, 64, 64, 64, 128, 128, 128, 256, 256, 256];
        let mut blocks = Vec::new();
        let mut c_in = 3;
        for (i, &c) in plan.iter().enumerate() {
            let stride = if i == 4 || i == 7 { 2 } else { 1 };
            blocks.push(BlockConfig { in_channels: c_in, out_channels: c, temporal_stride: stride, n_branches: 3 });
            c_in = c;
        }
        Self::with_blocks(blocks, n_classes, skeleton)
    }

    /// Two blocks (3 → 8 → 16 channels), stride 1, three units per block.
    pub fn small(n_classes: usize, skeleton: SkeletonRef) -> Self {
        let blocks = vec![
            BlockConfig { in_channels: 3, out_channels: 8, temporal_stride: 1, n_branches: 3 },
            BlockConfig { in_channels: 8, out_channels: 16, temporal_stride: 1, n_branches: 3 },
        ];
        Self::with_blocks(blocks, n_classes, skeleton)
    }

    pub fn with_blocks(blocks: Vec<BlockConfig>, n_classes: usize, skeleton: SkeletonRef) -> Self {
        NetworkConfig {
            blocks,
            n_classes,
            skeleton,
            gate_activation: GateActivation::Sigmoid,
            topology_mode: TopologyMode::Gaussian,
            aggregation_mode: AggregationMode::Gated,
            reduction: default_reduction(),
            min_reduced_channels: default_reduction(),
            temporal_kernel: default_temporal_kernel(),
            xi_zero_init: false,
            xi_bias: false,
            bn_eps: default_bn_eps(),
            bn_momentum: default_bn_momentum(),
            input_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.blocks.is_empty() {
            return err("network needs at least one block".into());
        }
        if self.n_classes < 2 {
            return err(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if self.temporal_kernel % 2 == 0 {
            return err("temporal kernel must be odd".into());
        }
        if self.reduction == 0 || self.min_reduced_channels == 0 {
            return err("reduction factors must be positive".into());
        }
        let mut c = 3;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.in_channels != c {
                return err(format!("block {i} expects {} input channels but receives {c}", b.in_channels));
            }
            if !(1..=2).contains(&b.temporal_stride) {
                return err(format!("block {i}: temporal stride must be 1 or 2"));
            }
            if b.n_branches == 0 || b.out_channels == 0 {
                return err(format!("block {i}: need at least one branch and one channel"));
            }
            c = b.out_channels;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalisation layers.
    Train,
    /// Running statistics in normalisation layers.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Aggregation<T> {
    Gated(GatedParams<T>),
    Plain(PlainParams<T>),
}

impl<T> Aggregation<T> {
    fn map_named<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> Aggregation<U> {
        match self {
            Aggregation::Gated(g) => Aggregation::Gated(g.map_named(&format!("{prefix}gated."), f)),
            Aggregation::Plain(p) => Aggregation::Plain(p.map_named(&format!("{prefix}plain."), f)),
        }
    }
}

/// One spatial unit: topology generator plus aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitParams<T = Tensor> {
    pub topology: TopologyParams<T>,
    pub aggregation: Aggregation<T>,
}

impl<T> UnitParams<T> {
    pub fn map_named<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> UnitParams<U> {
        UnitParams {
            topology: self.topology.map_named(&format!("{prefix}topo."), f),
            aggregation: self.aggregation.map_named(prefix, f),
        }
    }
}

impl UnitParams {
    pub fn random<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        cfg: &NetworkConfig,
        graph: &SkeletonGraph,
        rng: &mut R,
    ) -> Self {
        let c_mid = reduced_channels(c_in, cfg.reduction, cfg.min_reduced_channels);
        let topology = TopologyParams::random(
            c_in,
            c_mid,
            c_out,
            cfg.topology_mode == TopologyMode::Gaussian,
            cfg.xi_zero_init,
            cfg.xi_bias,
            rng,
        );
        let aggregation = match cfg.aggregation_mode {
            AggregationMode::Gated => Aggregation::Gated(GatedParams::random(c_in, c_out, graph, rng)),
            AggregationMode::Plain => Aggregation::Plain(PlainParams::random(c_in, c_out, graph, rng)),
        };
        UnitParams { topology, aggregation }
    }
}

/// Refined topology followed by gated or plain aggregation.
/// Returns `(output, A_Gaussian)`.
pub fn spatial_unit_forward(
    tape: &mut Tape,
    x: Var,
    phi: Var,
    p: &UnitParams<Var>,
    gate: GateActivation,
    hook: GateOverride,
) -> Result<(Var, Var)> {
    let a = gaussian_topology_forward(tape, x, phi, &p.topology)?;
    let out = match &p.aggregation {
        Aggregation::Gated(g) => gated_forward(tape, x, a, g, gate, hook)?.x_update,
        Aggregation::Plain(pl) => plain_forward(tape, x, a, pl)?,
    };
    Ok((out, a))
}

#[derive(Debug, Clone, PartialEq)]
struct NormIds {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

fn norm_ids(params: &mut ParamStore, prefix: &str, c: usize) -> NormIds {
    NormIds {
        gamma: params.add(format!("{prefix}.gamma"), Tensor::ones(&[c]), true),
        beta: params.add(format!("{prefix}.beta"), Tensor::zeros(&[c]), true),
        running_mean: params.add(format!("{prefix}.running_mean"), Tensor::zeros(&[c]), false),
        running_var: params.add(format!("{prefix}.running_var"), Tensor::ones(&[c]), false),
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    cfg: BlockConfig,
    units: Vec<UnitParams<ParamId>>,
    tconv_w: ParamId,
    norm: NormIds,
    residual: Option<ParamId>,
}

/// Running-statistics update requested by a training-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct NormUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stats: BatchStats,
}

#[derive(Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub norm_updates: Vec<NormUpdate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    graph: SkeletonGraph,
    phi: Tensor,
    input_norm: Option<NormIds>,
    blocks: Vec<Block>,
    head_w: ParamId,
    head_b: ParamId,
    params: ParamStore,
}

impl Network {
    pub fn new<R: Rng + ?Sized>(config: NetworkConfig, graph: SkeletonGraph, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let phi = graph.gaussian_filter().to_tensor();
        let mut params = ParamStore::new();
        let input_norm = config.input_norm.then(|| norm_ids(&mut params, "input_norm", graph.n_joints() * 3));
        let mut blocks = Vec::new();
        for (bi, bc) in config.blocks.iter().enumerate() {
            let (ci, co) = (bc.in_channels, bc.out_channels);
            let mut units = Vec::new();
            for m in 0..bc.n_branches {
                let unit = UnitParams::random(ci, co, &config, &graph, rng);
                units.push(unit.map_named(&format!("block{bi}.unit{m}."), &mut |name, t| {
                    params.add(name, t.clone(), true)
                }));
            }
            let k = config.temporal_kernel;
            let tconv_w = params.add(format!("block{bi}.tconv.w"), Tensor::xavier(&[k, co, co], k * co, k * co, rng), true);
            let norm = norm_ids(&mut params, &format!("block{bi}.norm"), co);
            let residual = (ci != co || bc.temporal_stride != 1)
                .then(|| params.add(format!("block{bi}.residual.w"), Tensor::xavier(&[1, ci, co], ci, co, rng), true));
            blocks.push(Block { cfg: bc.clone(), units, tconv_w, norm, residual });
        }
        let c_last = config.blocks.last().map(|b| b.out_channels).unwrap_or(3);
        let head_w = params.add("head.w", Tensor::normal(&[c_last, config.n_classes], (2.0 / config.n_classes as f64).sqrt(), rng), true);
        let head_b = params.add("head.b", Tensor::zeros(&[config.n_classes]), true);
        Ok(Network { config, graph, phi, input_norm, blocks, head_w, head_b, params })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn graph(&self) -> &SkeletonGraph {
        &self.graph
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Trainable scalar count.
    pub fn param_count(&self) -> usize {
        self.params.count_trainable()
    }

    /// Overwrites parameter values from `(name, tensor)` pairs; every entry
    /// must be present with the expected shape.
    pub fn load_params(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.params.len(),
                named.len()
            )));
        }
        for (name, t) in named {
            let id = self
                .params
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
            if self.params.get(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!("shape mismatch for {name}")));
            }
            *self.params.get_mut(id) = t.clone();
        }
        Ok(())
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let s = tape.shape(x);
        if s.len() != 4 || s[2] != self.graph.n_joints() || s[3] != 3 || s[0] == 0 || s[1] == 0 {
            return Err(shape_err(format!(
                "network input must be [B, T, {}, 3], got {s:?}",
                self.graph.n_joints()
            )));
        }
        Ok(())
    }

    /// One basic block. `vars` holds one tape handle per parameter entry.
    pub fn block_forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        index: usize,
        x: Var,
        mode: Mode,
        updates: &mut Vec<NormUpdate>,
    ) -> Result<Var> {
        let block = self.blocks.get(index).ok_or(Error::InvalidBlock { index, n_blocks: self.blocks.len() })?;
        let phi = tape.constant(self.phi.clone());
        let mut sum: Option<Var> = None;
        for unit in &block.units {
            let pv = unit.map_named("", &mut |_, id| vars[id.0]);
            let (out, _) =
                spatial_unit_forward(tape, x, phi, &pv, self.config.gate_activation, GateOverride::default())?;
            sum = Some(match sum {
                Some(s) => tape.add(s, out)?,
                None => out,
            });
        }
        let sum = sum.expect("at least one unit");
        let pad = (self.config.temporal_kernel - 1) / 2;
        let h = tape.temporal_conv(sum, vars[block.tconv_w.0], block.cfg.temporal_stride, pad)?;
        let h = self.normalize(tape, vars, &block.norm, h, mode, updates)?;
        let h = tape.relu(h);
        let res = match block.residual {
            Some(w) => tape.temporal_conv(x, vars[w.0], block.cfg.temporal_stride, 0)?,
            None => x,
        };
        tape.add(h, res)
    }

    fn normalize(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        ids: &NormIds,
        h: Var,
        mode: Mode,
        updates: &mut Vec<NormUpdate>,
    ) -> Result<Var> {
        let eps = self.config.bn_eps;
        let normed = match mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm(h, eps)?;
                updates.push(NormUpdate { running_mean: ids.running_mean, running_var: ids.running_var, stats });
                y
            }
            Mode::Eval => {
                let mean = self.params.get(ids.running_mean).data();
                let var = self.params.get(ids.running_var).data();
                let scale: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                let shift: Vec<f64> = mean.iter().zip(&scale).map(|(m, s)| -m * s).collect();
                let c = scale.len();
                let scale = tape.constant(Tensor::from_vec(vec![c], scale));
                let shift = tape.constant(Tensor::from_vec(vec![c], shift));
                let y = tape.mul(h, scale)?;
                tape.add(y, shift)?
            }
        };
        let y = tape.mul(normed, vars[ids.gamma.0])?;
        tape.add(y, vars[ids.beta.0])
    }

    /// Normalises each (joint, coordinate) channel of `[B, T, N, 3]` over batch and time.
    fn normalize_input(&self, tape: &mut Tape, vars: &[Var], x: Var, mode: Mode, updates: &mut Vec<NormUpdate>) -> Result<Var> {
        let Some(ids) = &self.input_norm else {
            return Ok(x);
        };
        let s = tape.shape(x).to_vec();
        let flat = tape.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
        let normed = self.normalize(tape, vars, ids, flat, mode, updates)?;
        tape.reshape(normed, &s)
    }

    /// `x: [B, T, N, 3]` → logits `[B, n_classes]`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var, mode: Mode) -> Result<ForwardOutput> {
        self.check_input(tape, x)?;
        let mut updates = Vec::new();
        let mut h = self.normalize_input(tape, vars, x, mode, &mut updates)?;
        for b in 0..self.blocks.len() {
            h = self.block_forward(tape, vars, b, h, mode, &mut updates)?;
        }
        let s = tape.shape(h).to_vec();
        let flat = tape.reshape(h, &[s[0], s[1] * s[2], s[3]])?;
        let pooled = tape.mean(flat, 1)?;
        let logits = tape.matmul(pooled, vars[self.head_w.0])?;
        let logits = tape.add(logits, vars[self.head_b.0])?;
        Ok(ForwardOutput { logits, norm_updates: updates })
    }

    /// Evaluation-mode logits for a `[B, T, N, 3]` batch.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind_constants(&mut tape);
        let x = tape.constant(batch.clone());
        let out = self.forward(&mut tape, &vars, x, Mode::Eval)?;
        Ok(tape.value(out.logits).clone())
    }

    fn bind_constants(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.entries().iter().map(|e| tape.constant(e.value.clone())).collect()
    }

    /// Evaluation-mode features entering block `index` for a `[B, T, N, 3]` batch.
    fn features_before(&self, tape: &mut Tape, vars: &[Var], index: usize, batch: &Tensor) -> Result<Var> {
        let x = tape.constant(batch.clone());
        self.check_input(tape, x)?;
        let mut sink = Vec::new();
        let mut h = self.normalize_input(tape, vars, x, Mode::Eval, &mut sink)?;
        for b in 0..index {
            h = self.block_forward(tape, vars, b, h, Mode::Eval, &mut sink)?;
        }
        Ok(h)
    }

    /// `A_Gaussian` of every unit in block `index` for a single `T × N × 3`
    /// sample, each `C' × N × N`.
    pub fn unit_topologies(&self, index: usize, sample: &Tensor) -> Result<Vec<Tensor>> {
        if index >= self.blocks.len() {
            return Err(Error::InvalidBlock { index, n_blocks: self.blocks.len() });
        }
        let mut shape = vec![1];
        shape.extend_from_slice(sample.shape());
        let batch = sample.clone().reshape(&shape)?;
        let mut tape = Tape::new();
        let vars = self.bind_constants(&mut tape);
        let h = self.features_before(&mut tape, &vars, index, &batch)?;
        let phi = tape.constant(self.phi.clone());
        let mut out = Vec::new();
        for unit in &self.blocks[index].units {
            let pv = unit.map_named("", &mut |_, id| vars[id.0]);
            let a = gaussian_topology_forward(&mut tape, h, phi, &pv.topology)?;
            let v = tape.value(a);
            let s = v.shape()[1..].to_vec();
            out.push(v.clone().reshape(&s)?);
        }
        Ok(out)
    }

    /// Mean of the block's unit topologies, `C' × N × N`.
    pub fn averaged_topology(&self, index: usize, sample: &Tensor) -> Result<Tensor> {
        let units = self.unit_topologies(index, sample)?;
        let m = units.len() as f64;
        let mut acc = Tensor::zeros(units[0].shape());
        for u in &units {
            for (a, v) in acc.data_mut().iter_mut().zip(u.data()) {
                *a += v;
            }
        }
        Ok(acc.map(|v| v / m))
    }

    /// Unit- and channel-averaged topology, `N × N`.
    pub fn averaged_topology_2d(&self, index: usize, sample: &Tensor) -> Result<Tensor> {
        let avg = self.averaged_topology(index, sample)?;
        let (c, n) = (avg.shape()[0], avg.shape()[1]);
        let mut out = Tensor::zeros(&[n, n]);
        for ch in 0..c {
            for (o, v) in out.data_mut().iter_mut().zip(&avg.data()[ch * n * n..(ch + 1) * n * n]) {
                *o += v;
            }
        }
        Ok(out.map(|v| v / c as f64))
    }

    /// Plain-text layer table with trainable parameter counts.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        let cfg = &self.config;
        let _ = writeln!(
            s,
            "skeleton {} ({} joints), {} classes, topology={:?}, aggregation={:?}, gates={:?}",
            self.graph.name,
            self.graph.n_joints(),
            cfg.n_classes,
            cfg.topology_mode,
            cfg.aggregation_mode,
            cfg.gate_activation
        );
        let _ = writeln!(s, "{:<8}{:>6}{:>6}{:>8}{:>7}{:>12}", "layer", "in", "out", "stride", "units", "params");
        let count_prefix = |prefix: &str| -> usize {
            self.params
                .entries()
                .iter()
                .filter(|e| e.trainable && e.name.starts_with(prefix))
                .map(|e| e.value.len())
                .sum()
        };
        if self.input_norm.is_some() {
            let c = self.graph.n_joints() * 3;
            let _ = writeln!(s, "{:<8}{:>6}{:>6}{:>8}{:>7}{:>12}", "input", c, c, "-", "-", count_prefix("input_norm."));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let _ = writeln!(
                s,
                "{:<8}{:>6}{:>6}{:>8}{:>7}{:>12}",
                format!("block{i}"),
                b.cfg.in_channels,
                b.cfg.out_channels,
                b.cfg.temporal_stride,
                b.units.len(),
                count_prefix(&format!("block{i}."))
            );
        }
        let _ = writeln!(s, "{:<8}{:>6}{:>6}{:>8}{:>7}{:>12}", "head", self.params.get(self.head_w).shape()[0], cfg.n_classes, "-", "-", count_prefix("head."));
        let _ = writeln!(s, "total trainable parameters: {}", self.param_count());
        s
    }
}

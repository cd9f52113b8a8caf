//! GRU-gated aggregation over a refined topology.
//!
//! The joint's own features are the previous state and the messages
//! aggregated from the other joints are the input:
//!
//! ```text
//! H_in     = ((1 − E) ⊙ A) · X W
//! Z        = g(X W_zo + H_in W_zi)
//! R        = g(X W_ro + H_in W_ri)
//! H_middle = tanh(R ⊙ (H_in W_mi) + X W_mo)
//! H_final  = (1 − Z) ⊙ H_middle + Z ⊙ proj(X)
//! X_update = H_final + A_static · X W
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Tape, Var};
use crate::error::{shape_err, Result};
use crate::graph::SkeletonGraph;
use crate::tensor::Tensor;

/// Nonlinearity used for the update and reset gates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateActivation {
    #[default]
    Sigmoid,
    Tanh,
}

impl From<GateActivation> for Activation {
    fn from(g: GateActivation) -> Self {
        match g {
            GateActivation::Sigmoid => Activation::Sigmoid,
            GateActivation::Tanh => Activation::Tanh,
        }
    }
}

/// Weights of one gated unit. `w_res` exists only when `C != C'`.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedParams<T = Tensor> {
    pub w_zo: T,
    pub w_zi: T,
    pub w_ro: T,
    pub w_ri: T,
    pub w_mo: T,
    pub w_mi: T,
    pub w_res: Option<T>,
    pub w_msg: T,
    pub a_static: T,
}

impl<T> GatedParams<T> {
    pub fn map_named<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> GatedParams<U> {
        let mut g = |name: &str, t: &T| f(&format!("{prefix}{name}"), t);
        GatedParams {
            w_zo: g("w_zo", &self.w_zo),
            w_zi: g("w_zi", &self.w_zi),
            w_ro: g("w_ro", &self.w_ro),
            w_ri: g("w_ri", &self.w_ri),
            w_mo: g("w_mo", &self.w_mo),
            w_mi: g("w_mi", &self.w_mi),
            w_res: self.w_res.as_ref().map(|w| g("w_res", w)),
            w_msg: g("w_msg", &self.w_msg),
            a_static: g("a_static", &self.a_static),
        }
    }
}

impl GatedParams {
    pub fn random<R: Rng + ?Sized>(c_in: usize, c_out: usize, graph: &SkeletonGraph, rng: &mut R) -> Self {
        let mut w = |a: usize, b: usize| Tensor::xavier(&[a, b], a, b, rng);
        GatedParams {
            w_zo: w(c_in, c_out),
            w_zi: w(c_out, c_out),
            w_ro: w(c_in, c_out),
            w_ri: w(c_out, c_out),
            w_mo: w(c_in, c_out),
            w_mi: w(c_out, c_out),
            w_res: (c_in != c_out).then(|| w(c_in, c_out)),
            w_msg: w(c_in, c_out),
            a_static: init_static_adjacency(graph),
        }
    }
}

/// The ungated aggregation: `A · X W + A_static · X W`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlainParams<T = Tensor> {
    pub w_msg: T,
    pub a_static: T,
}

impl<T> PlainParams<T> {
    pub fn map_named<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> PlainParams<U> {
        PlainParams {
            w_msg: f(&format!("{prefix}w_msg"), &self.w_msg),
            a_static: f(&format!("{prefix}a_static"), &self.a_static),
        }
    }
}

impl PlainParams {
    pub fn random<R: Rng + ?Sized>(c_in: usize, c_out: usize, graph: &SkeletonGraph, rng: &mut R) -> Self {
        PlainParams {
            w_msg: Tensor::xavier(&[c_in, c_out], c_in, c_out, rng),
            a_static: init_static_adjacency(graph),
        }
    }
}

/// Test hook that pins gate outputs to a constant.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GateOverride {
    pub update: Option<f64>,
    pub reset: Option<f64>,
}

/// Every intermediate of one gated forward pass.
#[derive(Debug, Clone, Copy)]
pub struct GateState {
    pub h_original: Var,
    pub h_in: Var,
    pub z: Var,
    pub r: Var,
    pub h_middle: Var,
    pub h_final: Var,
    pub x_update: Var,
}

/// Zeroes the diagonal of every channel.
pub fn mask_self_loops(tape: &mut Tape, a: Var) -> Result<Var> {
    let s = tape.shape(a);
    let r = s.len();
    if r < 2 || s[r - 1] != s[r - 2] {
        return Err(shape_err(format!("mask_self_loops needs square trailing axes, got {s:?}")));
    }
    let n = s[r - 1];
    let mut mask = Tensor::ones(&[n, n]);
    for i in 0..n {
        mask.set(&[i, i], 0.0);
    }
    let mask = tape.constant(mask);
    tape.mul(a, mask)
}

pub fn gated_forward(
    tape: &mut Tape,
    x: Var,
    a_gauss: Var,
    p: &GatedParams<Var>,
    gate: GateActivation,
    hook: GateOverride,
) -> Result<GateState> {
    let c_in = *tape.shape(x).last().unwrap_or(&0);
    let c_out = *tape.shape(p.w_zi).last().unwrap_or(&0);
    if c_in != c_out && p.w_res.is_none() {
        return Err(shape_err(format!("{c_in} -> {c_out} channels needs a residual projection")));
    }
    let xw = tape.matmul(x, p.w_msg)?;
    let masked = mask_self_loops(tape, a_gauss)?;
    let h_in = tape.graph_contract(masked, xw)?;

    let gate_of = |tape: &mut Tape, wo: Var, wi: Var, pinned: Option<f64>| -> Result<Var> {
        let lo = tape.matmul(x, wo)?;
        let li = tape.matmul(h_in, wi)?;
        let pre = tape.add(lo, li)?;
        Ok(match pinned {
            Some(v) => {
                let shape = tape.shape(pre).to_vec();
                tape.constant(Tensor::full(&shape, v))
            }
            None => tape.activation(gate.into(), pre),
        })
    };
    let z = gate_of(tape, p.w_zo, p.w_zi, hook.update)?;
    let r = gate_of(tape, p.w_ro, p.w_ri, hook.reset)?;

    let msg = tape.matmul(h_in, p.w_mi)?;
    let gated_msg = tape.mul(r, msg)?;
    let own = tape.matmul(x, p.w_mo)?;
    let pre = tape.add(gated_msg, own)?;
    let h_middle = tape.tanh(pre);

    let proj = match p.w_res {
        Some(w) => tape.matmul(x, w)?,
        None => x,
    };
    let keep = tape.affine(z, -1.0, 1.0);
    let new_part = tape.mul(keep, h_middle)?;
    let old_part = tape.mul(z, proj)?;
    let h_final = tape.add(new_part, old_part)?;

    let static_msg = tape.node_mix(p.a_static, xw)?;
    let x_update = tape.add(h_final, static_msg)?;
    Ok(GateState { h_original: x, h_in, z, r, h_middle, h_final, x_update })
}

/// `A · X W + A_static · X W` without gating or self-loop masking.
pub fn plain_forward(tape: &mut Tape, x: Var, a_gauss: Var, p: &PlainParams<Var>) -> Result<Var> {
    let xw = tape.matmul(x, p.w_msg)?;
    let dynamic = tape.graph_contract(a_gauss, xw)?;
    let fixed = tape.node_mix(p.a_static, xw)?;
    tape.add(dynamic, fixed)
}

/// `Λ^{-1/2} (Adj + I) Λ^{-1/2}` with `Λ` the degree matrix of `Adj + I`.
pub fn init_static_adjacency(g: &SkeletonGraph) -> Tensor {
    let n = g.n_joints();
    let mut a = Tensor::eye(n);
    for &(i, j) in g.edges() {
        a.set(&[i, j], 1.0);
        a.set(&[j, i], 1.0);
    }
    let inv_sqrt: Vec<f64> = (0..n).map(|i| 1.0 / ((g.degree(i) + 1) as f64).sqrt()).collect();
    for i in 0..n {
        for j in 0..n {
            let v = a.get(&[i, j]) * inv_sqrt[i] * inv_sqrt[j];
            a.set(&[i, j], v);
        }
    }
    a
}

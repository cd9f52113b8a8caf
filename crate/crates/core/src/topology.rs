//! Gaussian topology refinement.
//!
//! Two correlation branches read the same features. The preliminary branch
//! gives `A`; the auxiliary branch gives `A'`, whose rows are smoothed with the
//! skeleton's Gaussian filter (`Coe = A' · Φ`), max-abs normalised per row,
//! and used as a multiplicative correction of `A`. A final channel expansion
//! `ξ` lifts the corrected topology from `C''` to `C'` channels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::graph::FilterMatrix;
use crate::tensor::Tensor;

/// Rows whose max |entry| falls below this are zeroed by the normalisation.
pub const EPS_NORM: f64 = 1e-8;

/// `max(ceil(c / r), c_min)`.
pub fn reduced_channels(c: usize, reduction: usize, c_min: usize) -> usize {
    c.div_ceil(reduction).max(c_min)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    Preliminary,
    Auxiliary,
    Coefficient,
    NormalizedCoefficient,
    Gaussian,
}

/// A channel-wise joint-to-joint correlation array of shape `C × N × N`.
#[derive(Debug, Clone, PartialEq)]
pub struct TopologyGraph {
    pub kind: TopologyKind,
    pub a: Tensor,
}

impl TopologyGraph {
    pub fn new(kind: TopologyKind, a: Tensor) -> Result<Self> {
        let s = a.shape();
        if s.len() != 3 || s[1] != s[2] {
            return Err(shape_err(format!("topology must be C×N×N, got {s:?}")));
        }
        Ok(TopologyGraph { kind, a })
    }

    pub fn channels(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn n(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.a.get(&[c, i, j])
    }

    /// Gaussian-filtered correction coefficients of an auxiliary graph.
    pub fn correction_coefficients(&self, phi: &FilterMatrix) -> Result<TopologyGraph> {
        let value = eval(|t| {
            let a = t.constant(self.a.clone());
            let p = t.constant(phi.to_tensor());
            correction_coefficients(t, a, p)
        })?;
        TopologyGraph::new(TopologyKind::Coefficient, value)
    }

    pub fn normalized(&self) -> TopologyGraph {
        let value = eval(|t| {
            let a = t.constant(self.a.clone());
            normalize_coefficients(t, a)
        })
        .expect("rank-3 topology");
        TopologyGraph { kind: TopologyKind::NormalizedCoefficient, a: value }
    }

    /// `ξ(A ⊙ C̄oe)` for a preliminary graph `self`.
    pub fn refine(&self, coe_norm: &TopologyGraph, p: &RefineParams) -> Result<TopologyGraph> {
        let value = eval(|t| {
            let a = t.constant(self.a.clone());
            let c = t.constant(coe_norm.a.clone());
            let p = p.map_named("", &mut |_, w| t.constant(w.clone()));
            refine_topology(t, a, Some(c), &p)
        })?;
        TopologyGraph::new(TopologyKind::Gaussian, value)
    }

    /// One `N × N` block per channel, each preceded by a `channel,<index>` row.
    pub fn to_csv(&self) -> String {
        tensor_to_channel_csv(&self.a)
    }
}

pub(crate) fn tensor_to_channel_csv(a: &Tensor) -> String {
    let (c, n) = (a.shape()[0], a.shape()[1]);
    let mut out = String::new();
    for ch in 0..c {
        out.push_str(&format!("channel,{ch}\n"));
        for i in 0..n {
            let row: Vec<String> = (0..n).map(|j| a.get(&[ch, i, j]).to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
    }
    out
}

fn eval(f: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<Tensor> {
    let mut t = Tape::new();
    let v = f(&mut t)?;
    Ok(t.value(v).clone())
}

/// The `ψ` pair of one correlation branch, both `C × C''`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationBranchParams<T = Tensor> {
    pub w_src: T,
    pub w_dst: T,
}

impl<T> CorrelationBranchParams<T> {
    pub fn map_named<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> CorrelationBranchParams<U> {
        CorrelationBranchParams {
            w_src: f(&format!("{prefix}w_src"), &self.w_src),
            w_dst: f(&format!("{prefix}w_dst"), &self.w_dst),
        }
    }
}

impl CorrelationBranchParams {
    pub fn random<R: Rng + ?Sized>(c_in: usize, c_mid: usize, rng: &mut R) -> Self {
        CorrelationBranchParams {
            w_src: Tensor::xavier(&[c_in, c_mid], c_in, c_mid, rng),
            w_dst: Tensor::xavier(&[c_in, c_mid], c_in, c_mid, rng),
        }
    }

    /// Correlations of a single `T × N × C` sequence.
    pub fn correlate(&self, x: &Tensor, kind: TopologyKind) -> Result<TopologyGraph> {
        let value = eval(|t| {
            let xv = t.constant(x.clone());
            let p = self.map_named("", &mut |_, w| t.constant(w.clone()));
            pairwise_correlation(t, xv, &p)
        })?;
        TopologyGraph::new(kind, value)
    }
}

/// `ξ`: `C'' × C'` channel expansion with an optional bias.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineParams<T = Tensor> {
    pub w_expand: T,
    pub bias: Option<T>,
}

impl<T> RefineParams<T> {
    pub fn map_named<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> RefineParams<U> {
        RefineParams {
            w_expand: f(&format!("{prefix}w_expand"), &self.w_expand),
            bias: self.bias.as_ref().map(|b| f(&format!("{prefix}bias"), b)),
        }
    }
}

/// Everything one topology generator owns. `aux` is absent in the baseline
/// arm, where the correction coefficients are fixed to one.
#[derive(Debug, Clone, PartialEq)]
pub struct TopologyParams<T = Tensor> {
    pub corr: CorrelationBranchParams<T>,
    pub aux: Option<CorrelationBranchParams<T>>,
    pub refine: RefineParams<T>,
}

impl<T> TopologyParams<T> {
    pub fn map_named<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> TopologyParams<U> {
        TopologyParams {
            corr: self.corr.map_named(&format!("{prefix}psi12."), f),
            aux: self.aux.as_ref().map(|a| a.map_named(&format!("{prefix}psi34."), f)),
            refine: self.refine.map_named(&format!("{prefix}xi."), f),
        }
    }
}

impl TopologyParams {
    pub fn random<R: Rng + ?Sized>(
        c_in: usize,
        c_mid: usize,
        c_out: usize,
        gaussian: bool,
        xi_zero_init: bool,
        xi_bias: bool,
        rng: &mut R,
    ) -> Self {
        let corr = CorrelationBranchParams::random(c_in, c_mid, rng);
        let aux = gaussian.then(|| CorrelationBranchParams::random(c_in, c_mid, rng));
        let w_expand = if xi_zero_init {
            Tensor::zeros(&[c_mid, c_out])
        } else {
            Tensor::xavier(&[c_mid, c_out], c_mid, c_out, rng)
        };
        let bias = xi_bias.then(|| Tensor::zeros(&[c_out]));
        TopologyParams { corr, aux, refine: RefineParams { w_expand, bias } }
    }
}

// -------------------------------------------------------------------------
// differentiable stages
// -------------------------------------------------------------------------

/// `a[.., c, i, j] = tanh(mean_t((x_i·ψ_src)[t, c] − (x_j·ψ_dst)[t, c]))`
/// for `x: [.., T, N, C]`; output `[.., C'', N, N]`.
pub fn pairwise_correlation(tape: &mut Tape, x: Var, p: &CorrelationBranchParams<Var>) -> Result<Var> {
    let r = tape.shape(x).len();
    if r < 3 {
        return Err(shape_err(format!("features must be [.., T, N, C], got {:?}", tape.shape(x))));
    }
    // the frame mean commutes with the (linear) difference
    let src = tape.matmul(x, p.w_src)?;
    let src = tape.mean(src, r - 3)?;
    let dst = tape.matmul(x, p.w_dst)?;
    let dst = tape.mean(dst, r - 3)?;
    let diff = tape.pairwise_diff(src, dst)?;
    Ok(tape.tanh(diff))
}

/// `coe[.., c, i, j] = Σ_k φ[k, j] · a'[.., c, i, k]`, i.e. `A' · Φ` per channel.
pub fn correction_coefficients(tape: &mut Tape, a_aux: Var, phi: Var) -> Result<Var> {
    let n = *tape.shape(a_aux).last().unwrap_or(&0);
    if tape.shape(phi) != [n, n] {
        return Err(shape_err(format!(
            "filter {:?} does not match topology {:?}",
            tape.shape(phi),
            tape.shape(a_aux)
        )));
    }
    tape.matmul(a_aux, phi)
}

/// Per channel and row, divide by the row's max |entry| (zero rows stay zero).
pub fn normalize_coefficients(tape: &mut Tape, coe: Var) -> Result<Var> {
    tape.row_max_abs_normalize(coe, EPS_NORM)
}

/// `ξ(a ⊙ coe_norm)`; `coe_norm = None` means all-ones (the baseline arm).
pub fn refine_topology(
    tape: &mut Tape,
    a_prelim: Var,
    coe_norm: Option<Var>,
    p: &RefineParams<Var>,
) -> Result<Var> {
    let corrected = match coe_norm {
        Some(c) => {
            if tape.shape(c) != tape.shape(a_prelim) {
                return Err(shape_err(format!(
                    "coefficients {:?} vs topology {:?}",
                    tape.shape(c),
                    tape.shape(a_prelim)
                )));
            }
            tape.mul(a_prelim, c)?
        }
        None => a_prelim,
    };
    let r = tape.shape(corrected).len();
    if r < 3 {
        return Err(shape_err("topology must have rank ≥ 3"));
    }
    let lead: Vec<usize> = (0..r - 3).collect();
    let to_last: Vec<usize> = lead.iter().copied().chain([r - 2, r - 1, r - 3]).collect();
    let to_first: Vec<usize> = lead.iter().copied().chain([r - 1, r - 3, r - 2]).collect();
    let moved = tape.permute(corrected, &to_last)?;
    let mut expanded = tape.matmul(moved, p.w_expand)?;
    if let Some(b) = p.bias {
        expanded = tape.add(expanded, b)?;
    }
    tape.permute(expanded, &to_first)
}

/// Full pipeline from features to `A_Gaussian: [.., C', N, N]`.
pub fn gaussian_topology_forward(
    tape: &mut Tape,
    x: Var,
    phi: Var,
    p: &TopologyParams<Var>,
) -> Result<Var> {
    let a = pairwise_correlation(tape, x, &p.corr)?;
    let coe_norm = match &p.aux {
        Some(aux) => {
            let a_aux = pairwise_correlation(tape, x, aux)?;
            let coe = correction_coefficients(tape, a_aux, phi)?;
            Some(normalize_coefficients(tape, coe)?)
        }
        None => None,
    };
    refine_topology(tape, a, coe_norm, &p.refine)
}

//! Explicit-loop reference implementations. Each `*_error` builds a random
//! instance from `seed` (N ≤ 10) and returns the max |matrix form − loop|.

use g3cn::autodiff::Tape;
use g3cn::gated::{gated_forward, GateActivation, GateOverride, GatedParams};
use g3cn::topology::{correction_coefficients, pairwise_correlation, refine_topology, CorrelationBranchParams, RefineParams};
use g3cn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{rand_tensor, random_graph};

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn max_err(got: &Tensor, want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    got.data().iter().zip(want).fold(0.0, |m, (g, w)| m.max((g - w).abs()))
}

/// `Coe = A' · Φ` against `Σ_k φ[k, j] · a'[c, i, k]`.
pub fn coe_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=10);
    let c = rng.random_range(1..=4);
    let g = random_graph(n, rng.random_range(0..3), &mut rng);
    let phi = g.gaussian_filter();
    let a = rand_tensor(&[c, n, n], &mut rng);

    let mut t = Tape::new();
    let av = t.constant(a.clone());
    let pv = t.constant(phi.to_tensor());
    let coe = correction_coefficients(&mut t, av, pv).unwrap();

    let mut want = Vec::new();
    for ch in 0..c {
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += phi.get(k, j) * a.get(&[ch, i, k]);
                }
                want.push(s);
            }
        }
    }
    max_err(t.value(coe), &want)
}

/// Channel-wise contraction against a triple loop over (t, i, j).
pub fn contract_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=10);
    let (b, tl, c) = (rng.random_range(1..=2), rng.random_range(1..=4), rng.random_range(1..=5));
    let a = rand_tensor(&[b, c, n, n], &mut rng);
    let x = rand_tensor(&[b, tl, n, c], &mut rng);

    let mut t = Tape::new();
    let (av, xv) = (t.constant(a.clone()), t.constant(x.clone()));
    let out = t.graph_contract(av, xv).unwrap();

    let mut want = Vec::new();
    for bi in 0..b {
        for ti in 0..tl {
            for i in 0..n {
                for ch in 0..c {
                    let mut s = 0.0;
                    for j in 0..n {
                        s += a.get(&[bi, ch, i, j]) * x.get(&[bi, ti, j, ch]);
                    }
                    want.push(s);
                }
            }
        }
    }
    max_err(t.value(out), &want)
}

/// Pairwise correlation against per-frame dot products.
pub fn correlation_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=10);
    let (tl, ci, cm) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4));
    let x = rand_tensor(&[tl, n, ci], &mut rng);
    let p = CorrelationBranchParams { w_src: rand_tensor(&[ci, cm], &mut rng), w_dst: rand_tensor(&[ci, cm], &mut rng) };

    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let pv = p.map_named("", &mut |_, w| t.constant(w.clone()));
    let out = pairwise_correlation(&mut t, xv, &pv).unwrap();

    let mut want = Vec::new();
    for c in 0..cm {
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for ti in 0..tl {
                    let (mut u, mut v) = (0.0, 0.0);
                    for k in 0..ci {
                        u += x.get(&[ti, i, k]) * p.w_src.get(&[k, c]);
                        v += x.get(&[ti, j, k]) * p.w_dst.get(&[k, c]);
                    }
                    acc += u - v;
                }
                want.push((acc / tl as f64).tanh());
            }
        }
    }
    max_err(t.value(out), &want)
}

/// `ξ(A ⊙ C̄oe)` against an explicit channel sum.
pub fn refine_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=10);
    let (cm, co) = (rng.random_range(1..=4), rng.random_range(1..=6));
    let a = rand_tensor(&[cm, n, n], &mut rng);
    let coe = rand_tensor(&[cm, n, n], &mut rng);
    let w = rand_tensor(&[cm, co], &mut rng);
    let bias = rand_tensor(&[co], &mut rng);

    let mut t = Tape::new();
    let (av, cv) = (t.constant(a.clone()), t.constant(coe.clone()));
    let p = RefineParams { w_expand: t.constant(w.clone()), bias: Some(t.constant(bias.clone())) };
    let out = refine_topology(&mut t, av, Some(cv), &p).unwrap();
    assert_eq!(t.value(out).shape(), &[co, n, n]);

    let mut want = Vec::new();
    for o in 0..co {
        for i in 0..n {
            for j in 0..n {
                let mut s = bias.get(&[o]);
                for c in 0..cm {
                    s += a.get(&[c, i, j]) * coe.get(&[c, i, j]) * w.get(&[c, o]);
                }
                want.push(s);
            }
        }
    }
    max_err(t.value(out), &want)
}

fn vec_mat(v: &[f64], w: &Tensor) -> Vec<f64> {
    let (r, c) = (w.shape()[0], w.shape()[1]);
    (0..c).map(|o| (0..r).map(|k| v[k] * w.get(&[k, o])).sum()).collect()
}

/// Gated aggregation of one `T × N × C` sample, one joint and channel at a time.
pub fn gated_loop(x: &Tensor, a: &Tensor, p: &GatedParams, gate: GateActivation) -> Vec<f64> {
    let (tl, n, ci) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let co = p.w_zi.shape()[0];
    let g = |v: f64| match gate {
        GateActivation::Sigmoid => sigmoid(v),
        GateActivation::Tanh => v.tanh(),
    };
    let mut out = vec![0.0; tl * n * co];
    for ti in 0..tl {
        let xrow = |j: usize| -> Vec<f64> { (0..ci).map(|k| x.get(&[ti, j, k])).collect() };
        let xw: Vec<Vec<f64>> = (0..n).map(|j| vec_mat(&xrow(j), &p.w_msg)).collect();
        for i in 0..n {
            let mut h_in = vec![0.0; co];
            for (o, h) in h_in.iter_mut().enumerate() {
                for (j, xwj) in xw.iter().enumerate() {
                    if j != i {
                        *h += a.get(&[o, i, j]) * xwj[o];
                    }
                }
            }
            let xi = xrow(i);
            let (zo, zi) = (vec_mat(&xi, &p.w_zo), vec_mat(&h_in, &p.w_zi));
            let (ro, ri) = (vec_mat(&xi, &p.w_ro), vec_mat(&h_in, &p.w_ri));
            let (mo, mi) = (vec_mat(&xi, &p.w_mo), vec_mat(&h_in, &p.w_mi));
            let proj = match &p.w_res {
                Some(w) => vec_mat(&xi, w),
                None => xi.clone(),
            };
            for o in 0..co {
                let z = g(zo[o] + zi[o]);
                let r = g(ro[o] + ri[o]);
                let h_mid = (r * mi[o] + mo[o]).tanh();
                let h_final = (1.0 - z) * h_mid + z * proj[o];
                let stat: f64 = (0..n).map(|j| p.a_static.get(&[i, j]) * xw[j][o]).sum();
                out[(ti * n + i) * co + o] = h_final + stat;
            }
        }
    }
    out
}

/// `gated_forward` against [`gated_loop`].
pub fn gated_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=10);
    let tl = rng.random_range(1..=3);
    let ci = rng.random_range(1..=4);
    let co = if rng.random_bool(0.5) { ci } else { rng.random_range(1..=5) };
    let gate = if seed % 2 == 0 { GateActivation::Sigmoid } else { GateActivation::Tanh };
    let graph = random_graph(n, 1, &mut rng);
    let mut p = GatedParams::random(ci, co, &graph, &mut rng);
    p.a_static = rand_tensor(&[n, n], &mut rng);
    let x = rand_tensor(&[tl, n, ci], &mut rng);
    let a = rand_tensor(&[co, n, n], &mut rng);

    let mut t = Tape::new();
    let (xv, av) = (t.constant(x.clone()), t.constant(a.clone()));
    let pv = p.map_named("", &mut |_, w| t.constant(w.clone()));
    let s = gated_forward(&mut t, xv, av, &pv, gate, GateOverride::default()).unwrap();
    max_err(t.value(s.x_update), &gated_loop(&x, &a, &p, gate))
}

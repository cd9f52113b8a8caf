//! Relabelling joints consistently permutes unit outputs and leaves logits unchanged.

mod common;

use common::{permutation, permute_joints, rand_tensor, skeleton};
use g3cn::autodiff::Tape;
use g3cn::gated::{GateActivation, GateOverride};
use g3cn::graph::{SkeletonGraph, SkeletonRef};
use g3cn::network::{spatial_unit_forward, AggregationMode, Network, NetworkConfig, TopologyMode, UnitParams};
use g3cn::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-9;

fn unit_output(p: &UnitParams, g: &SkeletonGraph, x: &Tensor) -> Tensor {
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let phi = t.constant(g.gaussian_filter().to_tensor());
    let pv = p.map_named("", &mut |_, w| t.constant(w.clone()));
    let (out, _) = spatial_unit_forward(&mut t, xv, phi, &pv, GateActivation::Sigmoid, GateOverride::default()).unwrap();
    t.value(out).clone()
}

fn modes() -> [(TopologyMode, AggregationMode); 4] {
    [
        (TopologyMode::Baseline, AggregationMode::Plain),
        (TopologyMode::Gaussian, AggregationMode::Plain),
        (TopologyMode::Baseline, AggregationMode::Gated),
        (TopologyMode::Gaussian, AggregationMode::Gated),
    ]
}

#[test]
fn spatial_unit_is_permutation_equivariant() {
    let g = skeleton("ntu25");
    for (seed, (topo, agg)) in modes().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
        let perm = permutation(g.n_joints(), &mut rng);
        let gp = g.permuted(&perm).unwrap();
        let mut cfg = NetworkConfig::small(3, SkeletonRef::Inline(g.to_def()));
        cfg.topology_mode = topo;
        cfg.aggregation_mode = agg;
        let p = UnitParams::random(3, 8, &cfg, &g, &mut ChaCha8Rng::seed_from_u64(100));
        let pp = UnitParams::random(3, 8, &cfg, &gp, &mut ChaCha8Rng::seed_from_u64(100));
        let x = rand_tensor(&[2, 4, g.n_joints(), 3], &mut rng);

        let out = unit_output(&p, &g, &x);
        let out_p = unit_output(&pp, &gp, &permute_joints(&x, &perm));
        let diff = permute_joints(&out, &perm).max_abs_diff(&out_p);
        assert!(diff < TOL, "{topo:?}/{agg:?}: {diff}");
    }
}

#[test]
fn pooled_logits_are_permutation_invariant() {
    let g = skeleton("toy9");
    for (seed, (topo, agg)) in modes().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
        let perm = permutation(g.n_joints(), &mut rng);
        let gp = g.permuted(&perm).unwrap();
        let mut cfg = NetworkConfig::small(4, SkeletonRef::Inline(g.to_def()));
        cfg.topology_mode = topo;
        cfg.aggregation_mode = agg;
        let net = Network::new(cfg.clone(), g.clone(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let net_p = Network::new(cfg, gp, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let x = rand_tensor(&[3, 12, g.n_joints(), 3], &mut rng);

        let logits = net.predict(&x).unwrap();
        let logits_p = net_p.predict(&permute_joints(&x, &perm)).unwrap();
        let diff = logits.max_abs_diff(&logits_p);
        assert!(diff < TOL, "{topo:?}/{agg:?}: {diff}");
    }
}

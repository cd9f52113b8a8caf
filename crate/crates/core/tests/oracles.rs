//! Matrix-form kernels against explicit summation loops.

mod common;

use common::oracle;

const INSTANCES: u64 = 100;
const TOL: f64 = 1e-12;

fn check(name: &str, f: fn(u64) -> f64) {
    for seed in 0..INSTANCES {
        let e = f(seed);
        assert!(e < TOL, "{name} seed {seed}: {e:e}");
    }
}

#[test]
fn correction_coefficients_match_loop() {
    check("coe", oracle::coe_error);
}

#[test]
fn graph_contract_matches_triple_loop() {
    check("contract", oracle::contract_error);
}

#[test]
fn pairwise_correlation_matches_loop() {
    check("correlation", oracle::correlation_error);
}

#[test]
fn refinement_matches_loop() {
    check("refine", oracle::refine_error);
}

#[test]
fn gated_forward_matches_step_by_step_loop() {
    check("gated", oracle::gated_error);
}

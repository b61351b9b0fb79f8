//! Analytic gradients against central finite differences.

mod common;

const TOL: f64 = 1e-4;
const INSTANCES: u64 = 20;

fn check(name: &str, f: fn(u64) -> f64) {
    for seed in 0..INSTANCES {
        let err = f(seed);
        assert!(err < TOL, "{name} instance {seed}: relative error {err:e}");
    }
}

#[test]
fn convolution_gradients() {
    check("conv", common::conv_grad_error);
}

#[test]
fn dense_block_gradients() {
    check("dense block", common::dense_block_grad_error);
}

#[test]
fn pooling_gradients() {
    check("pooling", common::pool_grad_error);
}

#[test]
fn full_network_gradients() {
    check("network", common::network_grad_error);
}

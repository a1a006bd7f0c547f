//! Fixed networks and inputs shared by the benchmarks.

use sobolev_forge::algebra::compile_scalar;
use sobolev_forge::calculus::{build_product2, build_trapezoid};
use sobolev_forge::targets::registry;
use sobolev_forge::taylor::{build_euclidean, ConstructedApproximator, EuclideanParams};
use sobolev_forge::ConvResNetModel;

/// psi(3N(x - m/N)) with m = 3, N = 8 as a one-block residual network.
pub fn psi_net() -> ConvResNetModel {
    compile_scalar(&build_trapezoid(3, 8).expect("valid bump")).expect("compiles")
}

/// Multiplication network on [-5, 5]^2 with accuracy `eta`.
pub fn product_net(eta: f64) -> ConvResNetModel {
    compile_scalar(&build_product2(eta, 5.0).expect("valid product")).expect("compiles")
}

/// Compiled sinprod approximator on (0,1)^2, alpha = 2, grid size `n`.
pub fn sinprod(n: usize) -> ConstructedApproximator {
    let f = registry("sinprod", 2, 2).expect("registered target");
    build_euclidean(&f, &EuclideanParams::new(n, n)).expect("builds")
}

/// Deterministic points of (0,1)^2 off the construction breakpoints.
pub fn points(count: usize) -> Vec<[f64; 2]> {
    (0..count)
        .map(|i| {
            let t = (i as f64 + 0.5) / count as f64;
            [t, (t * 7.3 + 0.11).fract()]
        })
        .collect()
}

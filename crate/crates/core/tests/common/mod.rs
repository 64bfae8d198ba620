#![allow(dead_code)]

use std::path::PathBuf;

use etmpc::certify::DesignParams;
use etmpc::config::{resolve, Resolved, RunConfig};
use nalgebra::DMatrix;

pub const BENCH_K: [f64; 2] = [-0.44536, -1.09321];

pub fn benchmark_config_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("benchmarks/cart.cfg")
}

pub fn benchmark() -> Resolved {
    resolve(&RunConfig::load(&benchmark_config_path()).unwrap()).unwrap()
}

pub fn printed_p() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[0.1692, 0.0572, 0.0572, 0.1391])
}

pub fn benchmark_params() -> DesignParams {
    let k = DMatrix::from_row_slice(1, 2, &BENCH_K);
    let q = DMatrix::identity(2, 2) * 0.1;
    let r = DMatrix::identity(1, 1) * 0.1;
    let qstar = &q + k.transpose() * &r * &k;
    DesignParams {
        horizon: 2.0,
        alpha: 0.8,
        beta: 0.6,
        big_m: 10.0,
        delta: 8.1e-5,
        epsilon: 0.03,
        lipschitz: 1.4,
        rho: 0.00031,
        p: printed_p(),
        q,
        r,
        k,
        qstar,
    }
}

/// Composite 5-point Gauss–Legendre rule.
pub fn gauss_legendre<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize) -> f64 {
    const NODES: [f64; 5] = [
        0.0,
        -0.538_469_310_105_683_1,
        0.538_469_310_105_683_1,
        -0.906_179_845_938_664,
        0.906_179_845_938_664,
    ];
    const WEIGHTS: [f64; 5] = [
        0.568_888_888_888_888_9,
        0.478_628_670_499_366_5,
        0.478_628_670_499_366_5,
        0.236_926_885_056_189_1,
        0.236_926_885_056_189_1,
    ];
    let w = (b - a) / panels as f64;
    let mut sum = 0.0;
    for i in 0..panels {
        let mid = a + (i as f64 + 0.5) * w;
        let half = 0.5 * w;
        let mut s = 0.0;
        for (x, wt) in NODES.iter().zip(WEIGHTS.iter()) {
            s += wt * f(mid + half * x);
        }
        sum += half * s;
    }
    sum
}

/// Largest eigenvalue of a symmetric 2×2 matrix in closed form.
pub fn max_eig_2x2(m: &DMatrix<f64>) -> f64 {
    let (a, b, d) = (m[(0, 0)], m[(0, 1)], m[(1, 1)]);
    0.5 * (a + d) + (0.25 * (a - d) * (a - d) + b * b).sqrt()
}

pub fn min_eig_2x2(m: &DMatrix<f64>) -> f64 {
    let (a, b, d) = (m[(0, 0)], m[(0, 1)], m[(1, 1)]);
    0.5 * (a + d) - (0.25 * (a - d) * (a - d) + b * b).sqrt()
}

//! Sustained-throughput probe for the GEMM kernels at the shapes the
//! network actually uses. Run with `cargo run --example bench_gemm`.

use std::time::Instant;
use wmhseg_core::gemm::{matmul_ab, matmul_abt, matmul_atb};

fn bench(name: &str, flops_per_call: f64, mut f: impl FnMut()) {
    // warm up
    f();
    let t0 = Instant::now();
    let mut calls = 0u32;
    while t0.elapsed().as_secs_f64() < 1.0 {
        f();
        calls += 1;
    }
    let secs = t0.elapsed().as_secs_f64();
    let gflops = flops_per_call * calls as f64 / secs / 1e9;
    println!("{name:<40} {gflops:7.2} GF/s ({calls} calls in {secs:.2}s)");
}

fn main() {
    let mk = |n: usize| -> Vec<f32> { (0..n).map(|i| (i % 97) as f32 * 0.01 - 0.5).collect() };

    // conv1 as im2col GEMM: W[20, 2*49] x col[98, 26*26]
    {
        let (m, k, n) = (20, 98, 676);
        let (a, b) = (mk(m * k), mk(k * n));
        let mut c = vec![0.0f32; m * n];
        bench("conv1 fwd ab 20x98x676", 2.0 * (m * k * n) as f64, || {
            matmul_ab(&a, &b, &mut c, m, k, n, false)
        });
    }
    // conv4 as im2col GEMM: W[110, 80*9] x col[720, 18*18]
    {
        let (m, k, n) = (110, 720, 324);
        let (a, b) = (mk(m * k), mk(k * n));
        let mut c = vec![0.0f32; m * n];
        bench("conv4 fwd ab 110x720x324", 2.0 * (m * k * n) as f64, || {
            matmul_ab(&a, &b, &mut c, m, k, n, false)
        });
    }
    // FC1 forward over a 128-sample batch: X[128, 35640] x W[300, 35640]^T
    {
        let (m, k, n) = (128, 35640, 300);
        let (a, b) = (mk(m * k), mk(n * k));
        let mut c = vec![0.0f32; m * n];
        bench("fc1 fwd abt 128x35640x300", 2.0 * (m * k * n) as f64, || {
            matmul_abt(&a, &b, &mut c, m, k, n, false)
        });
    }
    // FC1 weight gradient: G[128, 300]^T x X[128, 35640]
    {
        let (m, k, n) = (300, 128, 35640);
        let (a, b) = (mk(k * m), mk(k * n));
        let mut c = vec![0.0f32; m * n];
        bench("fc1 dW atb 300x128x35640", 2.0 * (m * k * n) as f64, || {
            matmul_atb(&a, &b, &mut c, m, k, n, true)
        });
    }
    // FC1 input gradient: G[128, 300] x W[300, 35640]
    {
        let (m, k, n) = (128, 300, 35640);
        let (a, b) = (mk(m * k), mk(k * n));
        let mut c = vec![0.0f32; m * n];
        bench("fc1 dX ab 128x300x35640", 2.0 * (m * k * n) as f64, || {
            matmul_ab(&a, &b, &mut c, m, k, n, false)
        });
    }
    // conv dW accumulation via transposed im2col: up[110, 324] x col_t[324, 720]
    {
        let (m, k, n) = (110, 324, 720);
        let (a, b) = (mk(m * k), mk(k * n));
        let mut c = vec![0.0f32; m * n];
        bench("conv4 dW ab 110x324x720", 2.0 * (m * k * n) as f64, || {
            matmul_ab(&a, &b, &mut c, m, k, n, true)
        });
    }
    // conv input gradient: W[110,720]^T x up[110, 324]
    {
        let (m, k, n) = (720, 110, 324);
        let (a, b) = (mk(k * m), mk(k * n));
        let mut c = vec![0.0f32; m * n];
        bench("conv4 dcol atb 720x110x324", 2.0 * (m * k * n) as f64, || {
            matmul_atb(&a, &b, &mut c, m, k, n, false)
        });
    }
}

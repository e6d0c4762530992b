//! Deterministic matrix kernels.
//!
//! Reproducibility contract: the value of every output element is a pure
//! function of its logical inputs and the reduction length — never of the
//! thread count, the batch partition, or which caller invoked the kernel.
//! That is achieved by two rules:
//!
//! 1. parallelism and cache blocking only ever split *output* rows and
//!    columns; the reduction dimension is walked in a fixed order for each
//!    output element;
//! 2. accumulation uses `mul_add` with a fixed lane structure, so the
//!    compiler cannot re-associate sums differently at different call sites.
//!
//! Each kernel is `#[inline(never)]`: exactly one compiled copy per scalar
//! type exists, so two call sites computing the same logical product produce
//! bit-identical results.

use crate::tensor::Scalar;
use rayon::prelude::*;

/// Number of independent accumulator lanes in `dot`. Fixed: the lane
/// structure is part of the numeric contract, not a tuning knob.
const LANES: usize = 64;

/// Output rows owned by one parallel task / streamed together through the
/// reduction. Pure tuning: per-element values do not depend on it.
const ROW_BLOCK: usize = 8;

/// Output-column tile kept hot while walking the reduction dimension.
/// Pure tuning: per-element values do not depend on it.
const COL_TILE: usize = 4096;

/// Dot product with a fixed 64-lane accumulation structure and a fixed
/// pairwise reduction tree. Values depend only on the input contents.
#[inline(always)]
fn dot_lanes<F: Scalar>(x: &[F], y: &[F]) -> F {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [F::ZERO; LANES];
    let blocks = x.len() / LANES;
    for b in 0..blocks {
        let xb = &x[b * LANES..][..LANES];
        let yb = &y[b * LANES..][..LANES];
        for l in 0..LANES {
            acc[l] = xb[l].mul_add(yb[l], acc[l]);
        }
    }
    let mut tail = F::ZERO;
    for i in blocks * LANES..x.len() {
        tail = x[i].mul_add(y[i], tail);
    }
    let mut width = LANES / 2;
    while width > 0 {
        for l in 0..width {
            acc[l] = acc[l] + acc[l + width];
        }
        width /= 2;
    }
    acc[0] + tail
}

/// Public fixed-structure dot product (same kernel the GEMMs use).
#[inline(never)]
pub fn dot<F: Scalar>(x: &[F], y: &[F]) -> F {
    assert_eq!(x.len(), y.len(), "dot: length mismatch");
    dot_lanes(x, y)
}

/// Four dot products of `x` against four `y` rows in one pass. Each result
/// is bit-identical to `dot_lanes(x, y_i)` — the per-row accumulation
/// structure is unchanged; the rows are only interleaved for instruction
/// level parallelism and to share the `x` loads.
#[inline(always)]
fn dot_lanes_x4<F: Scalar>(x: &[F], y0: &[F], y1: &[F], y2: &[F], y3: &[F]) -> [F; 4] {
    let mut acc = [[F::ZERO; LANES]; 4];
    let blocks = x.len() / LANES;
    for b in 0..blocks {
        let xb = &x[b * LANES..][..LANES];
        let y0b = &y0[b * LANES..][..LANES];
        let y1b = &y1[b * LANES..][..LANES];
        let y2b = &y2[b * LANES..][..LANES];
        let y3b = &y3[b * LANES..][..LANES];
        for l in 0..LANES {
            acc[0][l] = xb[l].mul_add(y0b[l], acc[0][l]);
            acc[1][l] = xb[l].mul_add(y1b[l], acc[1][l]);
            acc[2][l] = xb[l].mul_add(y2b[l], acc[2][l]);
            acc[3][l] = xb[l].mul_add(y3b[l], acc[3][l]);
        }
    }
    let mut out = [F::ZERO; 4];
    for (r, y) in [y0, y1, y2, y3].into_iter().enumerate() {
        let mut tail = F::ZERO;
        for i in blocks * LANES..x.len() {
            tail = x[i].mul_add(y[i], tail);
        }
        let mut width = LANES / 2;
        while width > 0 {
            for l in 0..width {
                acc[r][l] = acc[r][l] + acc[r][l + width];
            }
            width /= 2;
        }
        out[r] = acc[r][0] + tail;
    }
    out
}

/// Shared skeleton for the two axpy-form products. `a_elem(kk, i)` fetches
/// the effective `A[i, kk]` of `C = A * B` for the requested orientation.
#[inline(always)]
fn axpy_product<F: Scalar>(
    a_elem: impl Fn(usize, usize) -> F + Sync,
    b: &[F],
    c: &mut [F],
    k: usize,
    n: usize,
    accumulate: bool,
) {
    c.par_chunks_mut(ROW_BLOCK * n)
        .enumerate()
        .for_each(|(chunk_idx, c_chunk)| {
            let row0 = chunk_idx * ROW_BLOCK;
            if !accumulate {
                c_chunk.iter_mut().for_each(|v| *v = F::ZERO);
            }
            let rows = c_chunk.len() / n;
            let mut j0 = 0;
            while j0 < n {
                let jw = COL_TILE.min(n - j0);
                for kk in 0..k {
                    let b_tile = &b[kk * n + j0..][..jw];
                    for r in 0..rows {
                        let aik = a_elem(kk, row0 + r);
                        let c_tile = &mut c_chunk[r * n + j0..][..jw];
                        for (cv, &bv) in c_tile.iter_mut().zip(b_tile.iter()) {
                            *cv = aik.mul_add(bv, *cv);
                        }
                    }
                }
                j0 += jw;
            }
        });
}

/// `C[m,n] = A[m,k] * B[k,n]`, adding into `c` when `accumulate` is set.
/// Each element accumulates strictly k-ascending.
#[inline(never)]
pub fn matmul_ab<F: Scalar>(
    a: &[F],
    b: &[F],
    c: &mut [F],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "matmul_ab: A size");
    assert_eq!(b.len(), k * n, "matmul_ab: B size");
    assert_eq!(c.len(), m * n, "matmul_ab: C size");
    axpy_product(|kk, i| a[i * k + kk], b, c, k, n, accumulate);
}

/// `C[m,n] = A[k,m]^T * B[k,n]`, adding into `c` when `accumulate` is set.
/// Each element accumulates strictly k-ascending.
#[inline(never)]
pub fn matmul_atb<F: Scalar>(
    a: &[F],
    b: &[F],
    c: &mut [F],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    assert_eq!(a.len(), k * m, "matmul_atb: A size");
    assert_eq!(b.len(), k * n, "matmul_atb: B size");
    assert_eq!(c.len(), m * n, "matmul_atb: C size");
    axpy_product(|kk, i| a[kk * m + i], b, c, k, n, accumulate);
}

/// `C[m,n] = A[m,k] * B[n,k]^T` (each element is a row-by-row dot product
/// with the fixed lane structure), adding into `c` when `accumulate` is set.
#[inline(never)]
pub fn matmul_abt<F: Scalar>(
    a: &[F],
    b: &[F],
    c: &mut [F],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "matmul_abt: A size");
    assert_eq!(b.len(), n * k, "matmul_abt: B size");
    assert_eq!(c.len(), m * n, "matmul_abt: C size");
    c.par_chunks_mut(ROW_BLOCK * n)
        .enumerate()
        .for_each(|(chunk_idx, c_chunk)| {
            let row0 = chunk_idx * ROW_BLOCK;
            let rows = c_chunk.len() / n;
            // j outer / row inner keeps each group of B rows resident while
            // all rows of the block consume it, so B streams once per block.
            let mut j = 0;
            while j + 4 <= n {
                let b0 = &b[j * k..][..k];
                let b1 = &b[(j + 1) * k..][..k];
                let b2 = &b[(j + 2) * k..][..k];
                let b3 = &b[(j + 3) * k..][..k];
                for r in 0..rows {
                    let d = dot_lanes_x4(&a[(row0 + r) * k..][..k], b0, b1, b2, b3);
                    for (q, dq) in d.into_iter().enumerate() {
                        let cv = &mut c_chunk[r * n + j + q];
                        *cv = if accumulate { *cv + dq } else { dq };
                    }
                }
                j += 4;
            }
            while j < n {
                let b_row = &b[j * k..][..k];
                for r in 0..rows {
                    let d = dot_lanes(&a[(row0 + r) * k..][..k], b_row);
                    let cv = &mut c_chunk[r * n + j];
                    *cv = if accumulate { *cv + d } else { d };
                }
                j += 1;
            }
        });
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn naive(
        a: &[f32],
        b: &[f32],
        m: usize,
        k: usize,
        n: usize,
        ta: bool,
        tb: bool,
    ) -> Vec<f64> {
        let mut c = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f64;
                for kk in 0..k {
                    let av = if ta { a[kk * m + i] } else { a[i * k + kk] };
                    let bv = if tb { b[j * k + kk] } else { b[kk * n + j] };
                    s += av as f64 * bv as f64;
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    fn rand_vec(rng: &mut impl Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn assert_close(got: &[f32], want: &[f64], k: usize) {
        let tol = 1e-5 * (k as f64).sqrt().max(1.0);
        for (i, (&g, &w)) in got.iter().zip(want.iter()).enumerate() {
            assert!(
                (g as f64 - w).abs() <= tol * w.abs().max(1.0),
                "element {i}: got {g}, want {w}"
            );
        }
    }

    #[test]
    fn kernels_match_naive_reference() {
        let mut rng = crate::rng::stream(1, 99, 0, 0);
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 4), (7, 130, 9), (16, 64, 16), (5, 67, 33), (21, 11, 4099)] {
            let a = rand_vec(&mut rng, m * k);
            let b = rand_vec(&mut rng, k * n);
            let mut c = vec![0.0f32; m * n];
            matmul_ab(&a, &b, &mut c, m, k, n, false);
            assert_close(&c, &naive(&a, &b, m, k, n, false, false), k);

            let bt = rand_vec(&mut rng, n * k);
            let mut c2 = vec![0.0f32; m * n];
            matmul_abt(&a, &bt, &mut c2, m, k, n, false);
            assert_close(&c2, &naive(&a, &bt, m, k, n, false, true), k);

            let at = rand_vec(&mut rng, k * m);
            let mut c3 = vec![0.0f32; m * n];
            matmul_atb(&at, &b, &mut c3, m, k, n, false);
            assert_close(&c3, &naive(&at, &b, m, k, n, true, false), k);
        }
    }

    #[test]
    fn accumulate_adds_to_existing() {
        let mut rng = crate::rng::stream(2, 99, 0, 0);
        let (m, k, n) = (4, 33, 6);
        let a = rand_vec(&mut rng, m * k);
        let b = rand_vec(&mut rng, k * n);
        let mut once = vec![0.0f32; m * n];
        matmul_ab(&a, &b, &mut once, m, k, n, false);
        let mut twice = once.clone();
        matmul_ab(&a, &b, &mut twice, m, k, n, true);
        for (t, o) in twice.iter().zip(once.iter()) {
            assert!((*t - o * 2.0).abs() <= 1e-5 * o.abs().max(1.0));
        }
    }

    /// The same product must be bit-identical under different thread counts.
    #[test]
    fn thread_count_does_not_change_bits() {
        let mut rng = crate::rng::stream(3, 99, 0, 0);
        let (m, k, n) = (37, 210, 53);
        let a = rand_vec(&mut rng, m * k);
        let b = rand_vec(&mut rng, k * n);
        let bt = rand_vec(&mut rng, n * k);
        let at = rand_vec(&mut rng, k * m);

        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                let mut c1 = vec![0.0f32; m * n];
                let mut c2 = vec![0.0f32; m * n];
                let mut c3 = vec![0.0f32; m * n];
                matmul_ab(&a, &b, &mut c1, m, k, n, false);
                matmul_abt(&a, &bt, &mut c2, m, k, n, false);
                matmul_atb(&at, &b, &mut c3, m, k, n, false);
                (c1, c2, c3)
            })
        };
        let base = run(1);
        for t in [2, 4] {
            let other = run(t);
            assert_eq!(base.0, other.0, "matmul_ab differs at {t} threads");
            assert_eq!(base.1, other.1, "matmul_abt differs at {t} threads");
            assert_eq!(base.2, other.2, "matmul_atb differs at {t} threads");
        }
    }

    #[test]
    fn dot_matches_f64_reference() {
        let mut rng = crate::rng::stream(4, 99, 0, 0);
        for len in [0, 1, 63, 64, 65, 1000] {
            let x = rand_vec(&mut rng, len);
            let y = rand_vec(&mut rng, len);
            let want: f64 = x
                .iter()
                .zip(y.iter())
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            let got = dot(&x, &y) as f64;
            assert!((got - want).abs() <= 1e-5 * want.abs().max(1.0));
        }
    }
}

//! 2-D valid convolution (stride 1, no padding, no pooling) for one sample.
//!
//! Layouts are row-major throughout:
//! - input `[c_in, h, w]`
//! - weight `[c_out, c_in, k, k]` (equivalently `[c_out, c_in*k*k]`)
//! - output `[c_out, h-k+1, w-k+1]`
//!
//! The im2col patch matrix uses `q = (c, ky, kx)` rows and `p = (oy, ox)`
//! columns, matching the flattened weight rows, so the forward pass is one
//! `W * col` product.

use crate::gemm;
use crate::tensor::Scalar;

/// Output spatial side for a valid convolution.
#[inline]
pub fn out_side(h: usize, k: usize) -> usize {
    debug_assert!(h >= k);
    h - k + 1
}

/// Scratch buffers for convolution passes, reusable across calls.
#[derive(Default)]
pub struct ConvScratch<F> {
    pub col: Vec<F>,
    pub col_t: Vec<F>,
    pub dcol: Vec<F>,
}

/// Build the `[c_in*k*k, oh*ow]` patch matrix.
pub fn im2col<F: Scalar>(input: &[F], c_in: usize, h: usize, w: usize, k: usize, col: &mut Vec<F>) {
    let (oh, ow) = (out_side(h, k), out_side(w, k));
    let p = oh * ow;
    col.resize(c_in * k * k * p, F::ZERO);
    let mut q = 0;
    for c in 0..c_in {
        let plane = &input[c * h * w..][..h * w];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut col[q * p..][..p];
                for oy in 0..oh {
                    let src = &plane[(oy + ky) * w + kx..][..ow];
                    dst[oy * ow..][..ow].copy_from_slice(src);
                }
                q += 1;
            }
        }
    }
}

/// Build the transposed patch matrix `[oh*ow, c_in*k*k]` (used by the
/// weight-gradient product so it can run in axpy form).
pub fn im2col_t<F: Scalar>(
    input: &[F],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    col_t: &mut Vec<F>,
) {
    let (oh, ow) = (out_side(h, k), out_side(w, k));
    let q_dim = c_in * k * k;
    col_t.resize(oh * ow * q_dim, F::ZERO);
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut col_t[(oy * ow + ox) * q_dim..][..q_dim];
            let mut q = 0;
            for c in 0..c_in {
                let plane = &input[c * h * w..][..h * w];
                for ky in 0..k {
                    let src = &plane[(oy + ky) * w + ox..][..k];
                    row[q..q + k].copy_from_slice(src);
                    q += k;
                }
            }
        }
    }
}

/// Forward convolution via im2col. `out` is fully overwritten.
pub fn conv2d_forward<F: Scalar>(
    input: &[F],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[F],
    bias: &[F],
    c_out: usize,
    k: usize,
    out: &mut [F],
    scratch: &mut ConvScratch<F>,
) {
    let (oh, ow) = (out_side(h, k), out_side(w, k));
    let p = oh * ow;
    let q = c_in * k * k;
    debug_assert_eq!(weight.len(), c_out * q);
    debug_assert_eq!(out.len(), c_out * p);
    im2col(input, c_in, h, w, k, &mut scratch.col);
    // Seed each output row with its bias, then accumulate the product, so
    // every element is bias + a k-ascending FMA chain.
    for (o, row) in out.chunks_exact_mut(p).enumerate() {
        row.iter_mut().for_each(|v| *v = bias[o]);
    }
    gemm::matmul_ab(weight, &scratch.col, out, c_out, q, p, true);
}

/// Reference forward pass: direct six-loop accumulation. Used by tests to
/// cross-check the im2col path.
pub fn conv2d_forward_direct<F: Scalar>(
    input: &[F],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[F],
    bias: &[F],
    c_out: usize,
    k: usize,
    out: &mut [F],
) {
    let (oh, ow) = (out_side(h, k), out_side(w, k));
    for o in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[o];
                for c in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iv = input[c * h * w + (oy + ky) * w + (ox + kx)];
                            let wv = weight[((o * c_in + c) * k + ky) * k + kx];
                            acc = iv.mul_add(wv, acc);
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
}

/// Backward convolution. Accumulates into `d_weight` / `d_bias`; when
/// `d_input` is given it is overwritten with the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<F: Scalar>(
    input: &[F],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[F],
    c_out: usize,
    k: usize,
    d_out: &[F],
    d_weight: &mut [F],
    d_bias: &mut [F],
    d_input: Option<&mut [F]>,
    scratch: &mut ConvScratch<F>,
) {
    let (oh, ow) = (out_side(h, k), out_side(w, k));
    let p = oh * ow;
    let q = c_in * k * k;
    debug_assert_eq!(d_out.len(), c_out * p);

    for (o, row) in d_out.chunks_exact(p).enumerate() {
        let mut acc = F::ZERO;
        for &v in row {
            acc += v;
        }
        d_bias[o] += acc;
    }

    im2col_t(input, c_in, h, w, k, &mut scratch.col_t);
    gemm::matmul_ab(d_out, &scratch.col_t, d_weight, c_out, p, q, true);

    if let Some(d_in) = d_input {
        debug_assert_eq!(d_in.len(), c_in * h * w);
        scratch.dcol.resize(q * p, F::ZERO);
        gemm::matmul_atb(weight, d_out, &mut scratch.dcol, q, c_out, p, false);
        d_in.iter_mut().for_each(|v| *v = F::ZERO);
        let mut qi = 0;
        for c in 0..c_in {
            let plane = &mut d_in[c * h * w..][..h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let src = &scratch.dcol[qi * p..][..p];
                    for oy in 0..oh {
                        let dst = &mut plane[(oy + ky) * w + kx..][..ow];
                        for (dv, &sv) in dst.iter_mut().zip(src[oy * ow..][..ow].iter()) {
                            *dv += sv;
                        }
                    }
                    qi += 1;
                }
            }
        }
    }
}

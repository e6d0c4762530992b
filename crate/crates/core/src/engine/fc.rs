//! Batched fully-connected layer.
//!
//! Layouts: activations are sample-major `[batch, dim]`; weights are
//! `[out_dim, in_dim]` so each unit's weights are one contiguous row.

use crate::gemm;
use crate::tensor::Scalar;

/// `y[b, o] = bias[o] + dot(x[b, :], w[o, :])`. Overwrites `y`.
pub fn fc_forward<F: Scalar>(
    x: &[F],
    weight: &[F],
    bias: &[F],
    y: &mut [F],
    batch: usize,
    in_dim: usize,
    out_dim: usize,
) {
    debug_assert_eq!(x.len(), batch * in_dim);
    debug_assert_eq!(weight.len(), out_dim * in_dim);
    debug_assert_eq!(y.len(), batch * out_dim);
    gemm::matmul_abt(x, weight, y, batch, in_dim, out_dim, false);
    for row in y.chunks_exact_mut(out_dim) {
        for (v, &b) in row.iter_mut().zip(bias.iter()) {
            *v += b;
        }
    }
}

/// Backward pass. Accumulates into `d_weight` / `d_bias` (batch-ascending);
/// when `d_x` is given it is overwritten with the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn fc_backward<F: Scalar>(
    x: &[F],
    weight: &[F],
    d_y: &[F],
    d_weight: &mut [F],
    d_bias: &mut [F],
    d_x: Option<&mut [F]>,
    batch: usize,
    in_dim: usize,
    out_dim: usize,
) {
    debug_assert_eq!(d_y.len(), batch * out_dim);
    // d_w[o, q] += sum_b d_y[b, o] * x[b, q], b ascending inside the kernel
    gemm::matmul_atb(d_y, x, d_weight, out_dim, batch, in_dim, true);
    for row in d_y.chunks_exact(out_dim) {
        for (db, &g) in d_bias.iter_mut().zip(row.iter()) {
            *db += g;
        }
    }
    if let Some(dx) = d_x {
        gemm::matmul_ab(d_y, weight, dx, batch, out_dim, in_dim, false);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn forward_known_values() {
        // 2 samples, 3 in, 2 out
        let x = vec![1.0f32, 2.0, 3.0, 0.5, -1.0, 2.0];
        let w = vec![1.0f32, 0.0, -1.0, 2.0, 1.0, 0.5];
        let b = vec![0.25f32, -0.5];
        let mut y = vec![0.0f32; 4];
        fc_forward(&x, &w, &b, &mut y, 2, 3, 2);
        // sample 0: [1*1+2*0+3*(-1)+0.25, 1*2+2*1+3*0.5-0.5] = [-1.75, 5.0]
        // sample 1: [0.5+0+(-2)+0.25, 1.0-1.0+1.0-0.5] = [-1.25, 0.5]
        assert_eq!(y, vec![-1.75, 5.0, -1.25, 0.5]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (batch, in_dim, out_dim) = (3usize, 7usize, 4usize);
        let mut rng = crate::rng::stream(7, 99, 0, 0);
        let x: Vec<f64> = (0..batch * in_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..out_dim * in_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..out_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let coef: Vec<f64> = (0..batch * out_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let loss = |w: &[f64], b: &[f64], x: &[f64]| -> f64 {
            let mut y = vec![0.0f64; batch * out_dim];
            fc_forward(x, w, b, &mut y, batch, in_dim, out_dim);
            y.iter().zip(coef.iter()).map(|(a, c)| a * c).sum()
        };

        let mut d_w = vec![0.0f64; w.len()];
        let mut d_b = vec![0.0f64; b.len()];
        let mut d_x = vec![0.0f64; x.len()];
        fc_backward(&x, &w, &coef, &mut d_w, &mut d_b, Some(&mut d_x), batch, in_dim, out_dim);

        let step = 1e-6;
        let check = |analytic: &[f64], perturb: &mut dyn FnMut(usize, f64) -> f64| {
            for i in 0..analytic.len() {
                let num = (perturb(i, step) - perturb(i, -step)) / (2.0 * step);
                let err = (num - analytic[i]).abs() / num.abs().max(analytic[i].abs()).max(1e-8);
                assert!(err <= 1e-5, "index {i}: analytic {} numeric {num}", analytic[i]);
            }
        };
        check(&d_w, &mut |i, eps| {
            let mut wp = w.clone();
            wp[i] += eps;
            loss(&wp, &b, &x)
        });
        check(&d_b, &mut |i, eps| {
            let mut bp = b.clone();
            bp[i] += eps;
            loss(&w, &bp, &x)
        });
        check(&d_x, &mut |i, eps| {
            let mut xp = x.clone();
            xp[i] += eps;
            loss(&w, &b, &xp)
        });
    }

    /// Same sample in different batch positions gets bit-identical outputs.
    #[test]
    fn forward_is_batch_invariant() {
        let mut rng = crate::rng::stream(8, 99, 0, 0);
        let (in_dim, out_dim) = (35, 9);
        let sample: Vec<f32> = (0..in_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f32> = (0..out_dim * in_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..out_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut alone = vec![0.0f32; out_dim];
        fc_forward(&sample, &w, &b, &mut alone, 1, in_dim, out_dim);

        let mut batch_x = Vec::new();
        for i in 0..5 {
            if i == 3 {
                batch_x.extend_from_slice(&sample);
            } else {
                batch_x.extend((0..in_dim).map(|_| rng.gen_range(-1.0f32..1.0)));
            }
        }
        let mut y = vec![0.0f32; 5 * out_dim];
        fc_forward(&batch_x, &w, &b, &mut y, 5, in_dim, out_dim);
        assert_eq!(&y[3 * out_dim..4 * out_dim], alone.as_slice());
    }
}

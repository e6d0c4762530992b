//! Elementwise activations, dropout, and the softmax cross-entropy loss.

use crate::tensor::Scalar;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// In-place ReLU.
pub fn relu_forward<F: Scalar>(x: &mut [F]) {
    for v in x.iter_mut() {
        *v = v.maximum(F::ZERO);
    }
}

/// ReLU backward from the *post*-activation values: gradient passes where
/// the output is strictly positive. An input exactly at 0 produces output 0
/// and therefore gradient 0 (the tie-at-zero convention).
pub fn relu_backward<F: Scalar>(post: &[F], d: &mut [F]) {
    debug_assert_eq!(post.len(), d.len());
    for (dv, &pv) in d.iter_mut().zip(post.iter()) {
        if !(pv > F::ZERO) {
            *dv = F::ZERO;
        }
    }
}

/// Fill `mask` with inverted-dropout multipliers: 0 with probability `p`,
/// otherwise `1/(1-p)`, so activations keep their expected value and
/// inference applies no rescaling. Draws come from the supplied keyed
/// stream, one f64 per element in index order.
pub fn dropout_mask<F: Scalar>(p: f64, rng: &mut ChaCha8Rng, mask: &mut [F]) {
    debug_assert!((0.0..1.0).contains(&p));
    let keep = F::from_f64(1.0 / (1.0 - p));
    for m in mask.iter_mut() {
        *m = if rng.gen::<f64>() < p { F::ZERO } else { keep };
    }
}

/// Apply a dropout mask in place (identical op forward and backward).
pub fn apply_mask<F: Scalar>(x: &mut [F], mask: &[F]) {
    debug_assert_eq!(x.len(), mask.len());
    for (v, &m) in x.iter_mut().zip(mask.iter()) {
        *v = *v * m;
    }
}

/// Two-way softmax with max-subtraction so large logits cannot overflow.
/// The single probability formula shared by the loss path and inference.
pub fn softmax2<F: Scalar>(logits: &[F]) -> [F; 2] {
    assert_eq!(logits.len(), 2, "softmax2 expects exactly two logits");
    let m = logits[0].maximum(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let z = e0 + e1;
    [e0 / z, e1 / z]
}

/// Softmax cross-entropy over exactly two logits.
///
/// Returns `(loss, probs, d_logits)` where `d_logits = probs - onehot(label)`
/// is the gradient of the loss with respect to the logits.
pub fn softmax_xent<F: Scalar>(logits: &[F], label: usize) -> (F, [F; 2], [F; 2]) {
    assert!(label < 2, "label must be 0 or 1");
    let p = softmax2(logits);
    let m = logits[0].maximum(logits[1]);
    let z = (logits[0] - m).exp() + (logits[1] - m).exp();
    // loss = -(l_y - m - ln z)
    let loss = m + z.ln() - logits[label];
    let mut d = p;
    d[label] = d[label] - F::ONE;
    (loss, p, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn relu_tie_at_zero_blocks_gradient() {
        let mut x = vec![-1.0f32, 0.0, 2.0];
        relu_forward(&mut x);
        assert_eq!(x, vec![0.0, 0.0, 2.0]);
        let mut d = vec![5.0f32, 5.0, 5.0];
        relu_backward(&x, &mut d);
        assert_eq!(d, vec![0.0, 0.0, 5.0]);
    }

    #[test]
    fn dropout_mask_is_keyed_and_unbiased() {
        let mut r1 = rng::stream(9, rng::purpose::DROPOUT, 100, 1);
        let mut r2 = rng::stream(9, rng::purpose::DROPOUT, 100, 1);
        let mut m1 = vec![0.0f32; 100_000];
        let mut m2 = vec![0.0f32; 100_000];
        dropout_mask(0.3, &mut r1, &mut m1);
        dropout_mask(0.3, &mut r2, &mut m2);
        assert_eq!(m1, m2);

        let mean: f64 = m1.iter().map(|&v| v as f64).sum::<f64>() / m1.len() as f64;
        assert!((mean - 1.0).abs() < 0.02, "inverted dropout mean {mean}");
        let zeros = m1.iter().filter(|&&v| v == 0.0).count() as f64 / m1.len() as f64;
        assert!((zeros - 0.3).abs() < 0.02, "drop rate {zeros}");
        let keep = 1.0f32 / 0.7;
        assert!(m1.iter().all(|&v| v == 0.0 || v == keep));

        let mut r3 = rng::stream(9, rng::purpose::DROPOUT, 101, 1);
        let mut m3 = vec![0.0f32; 100_000];
        dropout_mask(0.3, &mut r3, &mut m3);
        assert_ne!(m1, m3);
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let (loss, p, d) = softmax_xent(&[0.0f32, 0.0], 0);
        assert!((loss - std::f32::consts::LN_2).abs() < 1e-6);
        assert!((p[0] - 0.5).abs() < 1e-6 && (p[1] - 0.5).abs() < 1e-6);
        assert!((d[0] + 0.5).abs() < 1e-6 && (d[1] - 0.5).abs() < 1e-6);

        // extreme logits stay finite
        let (loss, p, _) = softmax_xent(&[1000.0f32, -1000.0], 0);
        assert!(loss.is_finite() && loss >= 0.0);
        assert!((p[0] - 1.0).abs() < 1e-6);

        let (loss, _, _) = softmax_xent(&[1000.0f32, -1000.0], 1);
        assert!(loss.is_finite() && loss > 100.0);
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let logits = [0.7f64, -0.3];
        let (_, _, d) = softmax_xent(&logits, 1);
        let step = 1e-7;
        for i in 0..2 {
            let mut lp = logits;
            lp[i] += step;
            let mut lm = logits;
            lm[i] -= step;
            let num =
                (softmax_xent(&lp, 1).0 - softmax_xent(&lm, 1).0) / (2.0 * step);
            assert!((num - d[i]).abs() < 1e-6, "logit {i}: analytic {} numeric {num}", d[i]);
        }
    }
}

//! Finite-difference gradient checking (always in f64).
//!
//! The checker is agnostic to the network it probes: callers provide one
//! closure that computes the loss *and* fills the store's gradients, and one
//! that computes the loss alone. Stochastic pieces (dropout) must be
//! disabled inside those closures or the comparison is meaningless.

use super::ParameterStore;
use crate::rng;
use rand::seq::index::sample;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub probes: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err <= tolerance
    }
}

/// Central-difference step size. Chosen small because a ReLU pre-activation
/// crossing zero inside the perturbation interval biases the difference
/// quotient by O(step); at 1e-6 any such crossing stays well below the
/// tolerance while f64 roundoff (~ε/step) still leaves a ~1e-10 noise floor.
pub const DEFAULT_STEP: f64 = 1e-6;
/// Acceptance tolerance on the relative error.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Relative error with the denominator floored at 1e-6 so probes whose true
/// gradient sits at the finite-difference noise floor cannot produce
/// spurious failures while genuine disagreements still explode.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compare analytic gradients against central finite differences.
///
/// Probes every element of every tensor when `probes_per_tensor` is `None`;
/// otherwise probes a seeded random subset of that size per tensor (all
/// tensors are always covered).
pub fn gradient_check(
    store: &mut ParameterStore<f64>,
    mut loss_with_grads: impl FnMut(&mut ParameterStore<f64>) -> f64,
    mut loss_only: impl FnMut(&ParameterStore<f64>) -> f64,
    probes_per_tensor: Option<usize>,
    seed: u64,
    step: f64,
) -> GradCheckReport {
    store.zero_grads();
    let _ = loss_with_grads(store);
    let analytic: Vec<Vec<f64>> = (0..store.len()).map(|t| store.grad(t).to_vec()).collect();

    let mut report = GradCheckReport {
        probes: 0,
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
    };

    for t in 0..store.len() {
        let numel = store.param(t).numel();
        let indices: Vec<usize> = match probes_per_tensor {
            Some(k) if k < numel => {
                let mut r = rng::stream(seed, rng::purpose::GRADCHECK, t as u64, 0);
                let mut idx = sample(&mut r, numel, k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..numel).collect(),
        };
        for i in indices {
            let orig = store.value(t)[i];
            store.value_mut(t)[i] = orig + step;
            let lp = loss_only(store);
            store.value_mut(t)[i] = orig - step;
            let lm = loss_only(store);
            store.value_mut(t)[i] = orig;
            let numeric = (lp - lm) / (2.0 * step);
            let err = rel_err(analytic[t][i], numeric);
            report.probes += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = store.param(t).name.clone();
                report.worst_index = i;
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{conv, fc, ops};
    use rand::Rng;

    /// Exercise the full op stack: conv -> relu -> fc -> softmax loss.
    fn tiny_net_loss(store: &ParameterStore<f64>, fault_sign_flip: bool) -> (f64, Vec<Vec<f64>>) {
        let (c_in, h, w, c_out, k) = (2, 6, 6, 3, 3);
        let oh = conv::out_side(h, k);
        let flat = c_out * oh * oh;
        let input: Vec<f64> = {
            let mut r = crate::rng::stream(77, 98, 0, 0);
            (0..c_in * h * w).map(|_| r.gen_range(-1.0..1.0)).collect()
        };
        let label = 1usize;

        let mut scratch = conv::ConvScratch::default();
        let mut conv_out = vec![0.0f64; flat];
        conv::conv2d_forward(
            &input, c_in, h, w,
            store.value(0), store.value(1), c_out, k,
            &mut conv_out, &mut scratch,
        );
        ops::relu_forward(&mut conv_out);
        let mut logits = vec![0.0f64; 2];
        fc::fc_forward(&conv_out, store.value(2), store.value(3), &mut logits, 1, flat, 2);
        let (loss, _, d_logits) = ops::softmax_xent(&logits, label);

        // backward
        let mut d_w_fc = vec![0.0f64; store.value(2).len()];
        let mut d_b_fc = vec![0.0f64; 2];
        let mut d_hidden = vec![0.0f64; flat];
        fc::fc_backward(
            &conv_out, store.value(2), &d_logits,
            &mut d_w_fc, &mut d_b_fc, Some(&mut d_hidden), 1, flat, 2,
        );
        ops::relu_backward(&conv_out, &mut d_hidden);
        let mut d_w_conv = vec![0.0f64; store.value(0).len()];
        let mut d_b_conv = vec![0.0f64; c_out];
        conv::conv2d_backward(
            &input, c_in, h, w, store.value(0), c_out, k,
            &d_hidden, &mut d_w_conv, &mut d_b_conv, None, &mut scratch,
        );
        if fault_sign_flip {
            d_w_conv.iter_mut().for_each(|g| *g = -*g);
        }
        (loss, vec![d_w_conv, d_b_conv, d_w_fc, d_b_fc])
    }

    fn build_store() -> ParameterStore<f64> {
        let (c_in, c_out, k) = (2, 3, 3);
        let flat = 3 * 4 * 4;
        let mut store: ParameterStore<f64> = ParameterStore::new();
        let w0 = store.register("conv.w", &[c_out, c_in, k, k]);
        store.init_glorot(w0, c_in * k * k, c_out * k * k, 5);
        store.register("conv.b", &[c_out]);
        let w1 = store.register("fc.w", &[2, flat]);
        store.init_glorot(w1, flat, 2, 5);
        store.register("fc.b", &[2]);
        store
    }

    fn run(fault: bool) -> GradCheckReport {
        let mut store = build_store();
        gradient_check(
            &mut store,
            |s| {
                let (loss, grads) = tiny_net_loss(s, fault);
                for (t, g) in grads.into_iter().enumerate() {
                    s.grad_mut(t).copy_from_slice(&g);
                }
                loss
            },
            |s| tiny_net_loss(s, false).0,
            None,
            3,
            DEFAULT_STEP,
        )
    }

    #[test]
    fn full_stack_gradients_pass() {
        let report = run(false);
        assert!(report.probes > 100);
        assert!(
            report.passes(DEFAULT_TOLERANCE),
            "max rel err {} at {}[{}]",
            report.max_rel_err,
            report.worst_param,
            report.worst_index
        );
    }

    #[test]
    fn sign_flip_fault_is_detected() {
        let report = run(true);
        assert!(!report.passes(DEFAULT_TOLERANCE), "fault went undetected");
        assert_eq!(report.worst_param, "conv.w");
    }

    #[test]
    fn subsampling_limits_probe_count() {
        let mut store = build_store();
        let report = gradient_check(
            &mut store,
            |s| {
                let (loss, grads) = tiny_net_loss(s, false);
                for (t, g) in grads.into_iter().enumerate() {
                    s.grad_mut(t).copy_from_slice(&g);
                }
                loss
            },
            |s| tiny_net_loss(s, false).0,
            Some(4),
            3,
            DEFAULT_STEP,
        );
        // 4 tensors, two smaller than 4 elements (biases of 3 and 2)
        assert_eq!(report.probes, 4 + 3 + 4 + 2);
        assert!(report.passes(DEFAULT_TOLERANCE));
    }
}

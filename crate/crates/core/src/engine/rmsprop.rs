//! RMSPROP optimizer.
//!
//! Update rule per element:
//! `r <- rho * r + (1 - rho) * g^2`, then `w <- w - lr * g / sqrt(r + eps)`.
//! Gradients are cleared after the step.

use super::ParameterStore;
use crate::tensor::Scalar;

#[derive(Clone, Debug)]
pub struct RmsProp<F> {
    pub lr: F,
    pub rho: F,
    pub eps: F,
    /// Squared-gradient running average, one buffer per parameter tensor.
    cache: Vec<Vec<F>>,
}

impl<F: Scalar> RmsProp<F> {
    pub const DEFAULT_LR: f64 = 1e-3;
    pub const DEFAULT_RHO: f64 = 0.9;
    pub const DEFAULT_EPS: f64 = 1e-8;

    pub fn new(store: &ParameterStore<F>, lr: f64, rho: f64, eps: f64) -> Self {
        RmsProp {
            lr: F::from_f64(lr),
            rho: F::from_f64(rho),
            eps: F::from_f64(eps),
            cache: store.iter().map(|p| vec![F::ZERO; p.numel()]).collect(),
        }
    }

    pub fn with_defaults(store: &ParameterStore<F>) -> Self {
        Self::new(store, Self::DEFAULT_LR, Self::DEFAULT_RHO, Self::DEFAULT_EPS)
    }

    /// Apply one update from the accumulated gradients, then clear them.
    pub fn step(&mut self, store: &mut ParameterStore<F>) {
        let one_minus_rho = F::ONE - self.rho;
        for (id, r_buf) in self.cache.iter_mut().enumerate() {
            let (lr, rho, eps) = (self.lr, self.rho, self.eps);
            let param_count = store.param(id).numel();
            debug_assert_eq!(param_count, r_buf.len());
            let p = &mut store.params_mut()[id];
            for ((w, g), r) in p.value.iter_mut().zip(p.grad.iter_mut()).zip(r_buf.iter_mut()) {
                *r = rho.mul_add(*r, one_minus_rho * *g * *g);
                *w = *w - lr * *g / (*r + eps).sqrt();
                *g = F::ZERO;
            }
        }
    }
}

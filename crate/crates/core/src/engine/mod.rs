//! Differentiable building blocks: parameters, layers, loss, optimizer,
//! and the finite-difference gradient checker.
//!
//! The engine is generic over [`Scalar`] so the same code path runs in f32
//! for training/inference and in f64 for gradient checking.

pub mod conv;
pub mod fc;
pub mod gradcheck;
pub mod ops;
pub mod rmsprop;

use crate::rng;
use crate::tensor::Scalar;
use rand::Rng;

/// Handle to a parameter tensor inside a [`ParameterStore`].
pub type ParamId = usize;

/// One named parameter tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param<F> {
    pub name: String,
    pub dims: Vec<usize>,
    pub value: Vec<F>,
    pub grad: Vec<F>,
}

impl<F: Scalar> Param<F> {
    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Ordered collection of parameter tensors. Registration order is the
/// canonical declaration order used for initialization streams and for
/// checkpoint serialization.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore<F> {
    params: Vec<Param<F>>,
}

impl<F: Scalar> ParameterStore<F> {
    pub fn new() -> Self {
        ParameterStore { params: Vec::new() }
    }

    /// Register a zero-initialized tensor; returns its id.
    pub fn register(&mut self, name: impl Into<String>, dims: &[usize]) -> ParamId {
        let n: usize = dims.iter().product();
        self.params.push(Param {
            name: name.into(),
            dims: dims.to_vec(),
            value: vec![F::ZERO; n],
            grad: vec![F::ZERO; n],
        });
        self.params.len() - 1
    }

    /// Glorot-uniform initialization: draws i.i.d. from
    /// `U(-L, L)` with `L = sqrt(6 / (fan_in + fan_out))`, from the stream
    /// keyed by (seed, GLOROT, tensor id). Draws happen in f64 and are then
    /// converted, so f32 and f64 instantiations see the same underlying
    /// sequence.
    pub fn init_glorot(&mut self, id: ParamId, fan_in: usize, fan_out: usize, seed: u64) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut r = rng::stream(seed, rng::purpose::GLOROT, id as u64, 0);
        for v in self.params[id].value.iter_mut() {
            *v = F::from_f64(r.gen_range(-limit..limit));
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, id: ParamId) -> &Param<F> {
        &self.params[id]
    }

    pub fn value(&self, id: ParamId) -> &[F] {
        &self.params[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [F] {
        &mut self.params[id].value
    }

    pub fn grad(&self, id: ParamId) -> &[F] {
        &self.params[id].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [F] {
        &mut self.params[id].grad
    }

    /// Split borrow: parameter value (shared) plus its gradient (unique).
    /// Look up a tensor by its registered name.
    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Mutable access to two distinct tensors at once (weight + bias of one
    /// layer during backward).
    pub fn pair_mut(&mut self, a: ParamId, b: ParamId) -> (&mut Param<F>, &mut Param<F>) {
        assert_ne!(a, b, "pair_mut needs two distinct tensors");
        if a < b {
            let (lo, hi) = self.params.split_at_mut(b);
            (&mut lo[a], &mut hi[0])
        } else {
            let (lo, hi) = self.params.split_at_mut(a);
            (&mut hi[0], &mut lo[b])
        }
    }

    pub fn value_and_grad_mut(&mut self, id: ParamId) -> (&[F], &mut [F]) {
        let p = &mut self.params[id];
        (&p.value, &mut p.grad)
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g = F::ZERO);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> &mut [Param<F>] {
        &mut self.params
    }

    /// Total scalar parameter count across all tensors.
    pub fn total_parameters(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    /// Copy all values out as f32 in declaration order (checkpointing).
    pub fn flatten_f32(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.total_parameters());
        for p in &self.params {
            out.extend(p.value.iter().map(|v| v.to_f32()));
        }
        out
    }

    /// Load values from a flat f32 buffer in declaration order.
    pub fn load_f32(&mut self, flat: &[f32]) -> crate::Result<()> {
        if flat.len() != self.total_parameters() {
            return Err(crate::Error::invalid(format!(
                "checkpoint holds {} parameters, network declares {}",
                flat.len(),
                self.total_parameters()
            )));
        }
        let mut off = 0;
        for p in self.params.iter_mut() {
            for v in p.value.iter_mut() {
                *v = F::from_f32(flat[off]);
                off += 1;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glorot_respects_limit_and_is_deterministic() {
        let mut s1: ParameterStore<f32> = ParameterStore::new();
        let id = s1.register("w", &[40, 90]);
        s1.init_glorot(id, 90, 40, 7);
        let limit = (6.0f64 / 130.0).sqrt();
        let vals = s1.value(id);
        assert!(vals.iter().all(|v| (v.abs() as f64) < limit));
        let mean: f64 = vals.iter().map(|&v| v as f64).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 0.02, "mean {mean} too far from 0");
        // nontrivial spread
        assert!(vals.iter().any(|&v| (v as f64) > 0.5 * limit));
        assert!(vals.iter().any(|&v| (v as f64) < -0.5 * limit));

        let mut s2: ParameterStore<f32> = ParameterStore::new();
        let id2 = s2.register("w", &[40, 90]);
        s2.init_glorot(id2, 90, 40, 7);
        assert_eq!(s1.value(id), s2.value(id2));

        let mut s3: ParameterStore<f32> = ParameterStore::new();
        let id3 = s3.register("w", &[40, 90]);
        s3.init_glorot(id3, 90, 40, 8);
        assert_ne!(s1.value(id), s3.value(id3));
    }

    #[test]
    fn f32_and_f64_glorot_agree() {
        let mut a: ParameterStore<f32> = ParameterStore::new();
        let ia = a.register("w", &[3, 5]);
        a.init_glorot(ia, 5, 3, 11);
        let mut b: ParameterStore<f64> = ParameterStore::new();
        let ib = b.register("w", &[3, 5]);
        b.init_glorot(ib, 5, 3, 11);
        for (x, y) in a.value(ia).iter().zip(b.value(ib).iter()) {
            assert_eq!(*x, *y as f32);
        }
    }

    #[test]
    fn flatten_and_load_round_trip() {
        let mut s: ParameterStore<f32> = ParameterStore::new();
        let a = s.register("a", &[2, 3]);
        let b = s.register("b", &[4]);
        s.init_glorot(a, 3, 2, 1);
        s.init_glorot(b, 4, 4, 1);
        let flat = s.flatten_f32();
        let mut t: ParameterStore<f32> = ParameterStore::new();
        t.register("a", &[2, 3]);
        t.register("b", &[4]);
        t.load_f32(&flat).unwrap();
        assert_eq!(s.value(a), t.value(a));
        assert_eq!(s.value(b), t.value(b));
        assert!(t.load_f32(&flat[1..]).is_err());
    }
}
